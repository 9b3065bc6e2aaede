//! Post-attention feed-forward variants: Boom, a plain two-layer FC, or none.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear};
use crate::params::ParamStore;
use crate::tensor::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfKind {
    Boom,
    Fc,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeedForwardSpec {
    pub kind: FfKind,
    pub d_model: usize,
    pub d_inner: usize,
}

impl FeedForwardSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kind == FfKind::Boom && (self.d_inner == 0 || !self.d_inner.is_multiple_of(self.d_model)) {
            return Err(Error::Config(format!(
                "boom inner width {} must be a positive multiple of d_model {}",
                self.d_inner, self.d_model
            )));
        }
        if self.kind == FfKind::Fc && self.d_inner == 0 {
            return Err(Error::Config("fc inner width must be positive".into()));
        }
        Ok(())
    }

    /// Number of `d_model`-wide chunks summed by Boom.
    pub fn chunks(&self) -> usize {
        self.d_inner / self.d_model
    }

    pub fn num_params(&self) -> usize {
        let (d, di) = (self.d_model, self.d_inner);
        match self.kind {
            FfKind::None => 0,
            FfKind::Boom => d * di + di,
            FfKind::Fc => d * di + di + di * d + d,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub spec: FeedForwardSpec,
    pub expand: Option<Linear>,
    pub contract: Option<Linear>,
}

impl FeedForward {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: FeedForwardSpec,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let (expand, contract) = match spec.kind {
            FfKind::None => (None, None),
            FfKind::Boom => (Some(Linear::new(store, &format!("{name}.expand"), spec.d_model, spec.d_inner, true, rng)?), None),
            FfKind::Fc => (
                Some(Linear::new(store, &format!("{name}.expand"), spec.d_model, spec.d_inner, true, rng)?),
                Some(Linear::new(store, &format!("{name}.contract"), spec.d_inner, spec.d_model, true, rng)?),
            ),
        };
        Ok(FeedForward { spec, expand, contract })
    }

    pub fn forward<'t, T: Float>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        match self.spec.kind {
            FfKind::None => Ok(x),
            FfKind::Boom => self.boom_forward(ctx, x),
            FfKind::Fc => self.fc_forward(ctx, x),
        }
    }

    /// `Σ_chunks GeLU(x·W₁ + b₁)`: expand, activate, fold back by summing
    /// contiguous `d_model`-wide chunks. No second weight matrix.
    pub fn boom_forward<'t, T: Float>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let expand = self.expand.as_ref().ok_or_else(|| Error::Config("boom layer without weights".into()))?;
        expand.forward(ctx, x)?.gelu().chunk_sum(self.spec.chunks())
    }

    /// `GeLU(x·W₁ + b₁)·W₂ + b₂`.
    pub fn fc_forward<'t, T: Float>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (Some(expand), Some(contract)) = (&self.expand, &self.contract) else {
            return Err(Error::Config("fc layer without weights".into()));
        };
        contract.forward(ctx, expand.forward(ctx, x)?.gelu())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::nn::uniform;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn boom_rejects_indivisible_width() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = FeedForwardSpec { kind: FfKind::Boom, d_model: 4, d_inner: 10 };
        assert!(FeedForward::new(&mut store, "ff", spec, &mut rng).is_err());
    }

    #[test]
    fn boom_with_zero_weights_is_zero() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = FeedForwardSpec { kind: FfKind::Boom, d_model: 3, d_inner: 6 };
        let ff = FeedForward::new(&mut store, "ff", spec, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let tape = Tape::new();
        let mut drng = ChaCha8Rng::seed_from_u64(0);
        let ctx = Ctx::new(&tape, &store, false, &mut drng);
        let x = ctx.constant(uniform(&[2, 3], 1.0, &mut rng));
        let y = ff.forward(&ctx, x).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn chunk_sum_of_ones_and_concat() {
        let tape = Tape::<f64>::new();
        let ones = tape.constant(Tensor::full(&[2, 8], 1.0));
        assert!(ones.chunk_sum(2).unwrap().value().data().iter().all(|&v| v == 2.0));
        let a = [1.5, -2.0, 0.25, 3.0];
        let b = [0.5, 4.0, -1.25, 7.0];
        let cat = tape.constant(Tensor::from_f64(&[1, 8], &[a, b].concat()).unwrap());
        let s = cat.chunk_sum(2).unwrap();
        let expected: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        assert_eq!(s.value().data(), expected.as_slice());
    }

    #[test]
    fn fc_with_stacked_identities_equals_boom() {
        let (d, di) = (3, 9);
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let boom = FeedForward::new(&mut store, "boom", FeedForwardSpec { kind: FfKind::Boom, d_model: d, d_inner: di }, &mut rng).unwrap();
        let fc = FeedForward::new(&mut store, "fc", FeedForwardSpec { kind: FfKind::Fc, d_model: d, d_inner: di }, &mut rng).unwrap();
        // share the expansion; W₂ = [I; I; I], b₂ = 0
        let w1 = store.value(boom.expand.as_ref().unwrap().weight).clone();
        let b1 = store.value(boom.expand.as_ref().unwrap().bias.unwrap()).clone();
        *store.value_mut(fc.expand.as_ref().unwrap().weight) = w1;
        *store.value_mut(fc.expand.as_ref().unwrap().bias.unwrap()) = b1;
        let c = fc.contract.as_ref().unwrap();
        let mut w2 = Tensor::zeros(&[di, d]);
        for r in 0..di {
            w2.data_mut()[r * d + r % d] = 1.0;
        }
        *store.value_mut(c.weight) = w2;
        *store.value_mut(c.bias.unwrap()) = Tensor::zeros(&[d]);
        let tape = Tape::new();
        let mut drng = ChaCha8Rng::seed_from_u64(0);
        let ctx = Ctx::new(&tape, &store, false, &mut drng);
        let x = ctx.constant(uniform(&[4, 2, d], 2.0, &mut rng));
        let yb = boom.forward(&ctx, x).unwrap().to_tensor();
        let yf = fc.forward(&ctx, x).unwrap().to_tensor();
        assert!(yb.max_abs_diff(&yf) < 1e-14, "diff {}", yb.max_abs_diff(&yf));
    }

    #[test]
    fn param_counts() {
        for (kind, di) in [(FfKind::Boom, 8), (FfKind::Fc, 8), (FfKind::None, 8)] {
            let mut store = ParamStore::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let spec = FeedForwardSpec { kind, d_model: 4, d_inner: di };
            FeedForward::new(&mut store, "ff", spec, &mut rng).unwrap();
            assert_eq!(store.num_scalars(), spec.num_params());
        }
        let boom = FeedForwardSpec { kind: FfKind::Boom, d_model: 1024, d_inner: 4096 };
        let fc = FeedForwardSpec { kind: FfKind::Fc, ..boom };
        assert_eq!(fc.num_params() - boom.num_params(), 4096 * 1024 + 1024);
    }
}
