//! Parameterized primitives (linear, layer norm, embedding) and the forward
//! context shared by every layer.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Everything a forward pass needs besides its inputs: the tape, the
/// parameters, the train/eval switch and the dropout generator.
pub struct Ctx<'t, 'a, T: Float> {
    pub tape: &'t Tape<T>,
    pub store: &'a ParamStore<T>,
    pub train: bool,
    rng: RefCell<&'a mut ChaCha8Rng>,
    leaves: RefCell<HashMap<ParamId, Var<'t, T>>>,
}

impl<'t, 'a, T: Float> Ctx<'t, 'a, T> {
    pub fn new(tape: &'t Tape<T>, store: &'a ParamStore<T>, train: bool, rng: &'a mut ChaCha8Rng) -> Self {
        Ctx { tape, store, train, rng: RefCell::new(rng), leaves: RefCell::new(HashMap::new()) }
    }

    /// Tape leaf for a parameter; created once per tape.
    pub fn param(&self, id: ParamId) -> Var<'t, T> {
        if let Some(v) = self.leaves.borrow().get(&id) {
            return *v;
        }
        let v = self.tape.param(self.store, id);
        self.leaves.borrow_mut().insert(id, v);
        v
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<'t, T> {
        self.tape.constant(t)
    }

    /// Runs `f` with the dropout generator.
    pub fn with_rng<R>(&self, f: impl FnOnce(&mut ChaCha8Rng) -> R) -> R {
        let mut rng = self.rng.borrow_mut();
        f(&mut rng)
    }

    pub fn dropout(&self, x: Var<'t, T>, p: f64) -> Result<Var<'t, T>> {
        let mut rng = self.rng.borrow_mut();
        x.dropout(p, self.train, &mut **rng)
    }
}

pub fn uniform<T: Float, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.random_range(-bound..=bound))).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weights uniform in `±1/√d_in`, bias zero.
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = store.register(format!("{name}.weight"), uniform(&[d_in, d_out], bound, rng))?;
        let bias = if bias {
            Some(store.register(format!("{name}.bias"), Tensor::zeros(&[d_out]))?)
        } else {
            None
        };
        Ok(Linear { weight, bias, d_in, d_out })
    }

    pub fn forward<'t, T: Float>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.linear(ctx.param(self.weight), self.bias.map(|b| ctx.param(b)))
    }

    pub fn num_params(d_in: usize, d_out: usize, bias: bool) -> usize {
        d_in * d_out + if bias { d_out } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<Self> {
        let gamma = store.register(format!("{name}.gamma"), Tensor::full(&[d], T::ONE))?;
        let beta = store.register(format!("{name}.beta"), Tensor::zeros(&[d]))?;
        Ok(LayerNorm { gamma, beta, eps: LN_EPS })
    }

    pub fn forward<'t, T: Float>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(ctx.param(self.gamma), ctx.param(self.beta), self.eps)
    }

    pub fn num_params(d: usize) -> usize {
        2 * d
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub weight: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.register(format!("{name}.weight"), uniform(&[vocab, dim], 0.02, rng))?;
        Ok(Embedding { weight, vocab, dim })
    }

    /// Looks up `ids` laid out with leading shape `lead`.
    pub fn forward<'t, T: Float>(&self, ctx: &Ctx<'t, '_, T>, ids: &[usize], lead: &[usize]) -> Result<Var<'t, T>> {
        ctx.tape.embedding(ctx.param(self.weight), ids, lead)
    }
}
