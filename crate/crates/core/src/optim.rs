//! LAMB and Adam, global-norm gradient clipping and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Lamb,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Trust-ratio clamp; ignored by Adam.
    pub clamp_lo: f64,
    pub clamp_hi: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            kind: OptimizerKind::Lamb,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.0,
            clamp_lo: 0.0,
            clamp_hi: 10.0,
        }
    }
}

impl OptimConfig {
    pub fn adam() -> Self {
        OptimConfig { kind: OptimizerKind::Adam, ..Self::default() }
    }
}

/// `‖w‖/‖u‖` when both norms are positive, else 1; then clamped.
pub fn trust_ratio(w_norm: f64, u_norm: f64, lo: f64, hi: f64) -> f64 {
    let r = if w_norm > 0.0 && u_norm > 0.0 { w_norm / u_norm } else { 1.0 };
    r.clamp(lo, hi)
}

/// First/second moments per parameter tensor and the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T> {
    pub config: OptimConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Float> Optimizer<T> {
    pub fn new(config: OptimConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect::<Vec<_>>();
        Optimizer { config, m: zeros(), v: zeros(), step: 0 }
    }

    /// Applies one update from the gradients held in `store`. A non-finite
    /// gradient rejects the whole step before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for id in store.ids() {
            if store.grad(id).data().iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient(store.name(id).to_string()));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (ib1, ib2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let (bc1, bc2) = (T::from_f64(bc1), T::from_f64(bc2));
        let (eps, wd) = (T::from_f64(c.eps), T::from_f64(c.weight_decay));
        let ids: Vec<_> = store.ids().collect();
        let mut u = Vec::new();
        for (k, id) in ids.into_iter().enumerate() {
            let (w, g) = store.value_and_grad_mut(id);
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            u.clear();
            u.reserve(w.len());
            for i in 0..w.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + ib1 * gi;
                v[i] = b2 * v[i] + ib2 * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                u.push(mh / (vh.sqrt() + eps) + wd * w.data()[i]);
            }
            let r = match c.kind {
                OptimizerKind::Adam => 1.0,
                OptimizerKind::Lamb => {
                    let un = u.iter().map(|x| x.to_f64() * x.to_f64()).sum::<f64>().sqrt();
                    trust_ratio(w.norm_l2(), un, c.clamp_lo, c.clamp_hi)
                }
            };
            let scale = T::from_f64(lr * r);
            for (wi, &ui) in w.data_mut().iter_mut().zip(&u) {
                *wi -= scale * ui;
            }
        }
        Ok(())
    }
}

/// Global L2 norm of all gradients in `store`.
pub fn grad_norm<T: Float>(store: &ParamStore<T>) -> f64 {
    store
        .ids()
        .map(|id| store.grad(id).data().iter().map(|g| g.to_f64() * g.to_f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Float>(store: &mut ParamStore<T>, max_norm: f64) -> Result<f64> {
    if max_norm.is_nan() || max_norm <= 0.0 {
        return Err(Error::InvalidArgument(format!("max_norm {max_norm} must be positive")));
    }
    let norm = grad_norm(store);
    if norm > max_norm {
        let s = T::from_f64(max_norm / norm);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.grad_mut(id).data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    Ok(norm)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// Linear ramp from 0 to `lr` over the first `steps` steps, then flat.
    Warmup { lr: f64, steps: u64 },
}

impl LrSchedule {
    pub fn target(&self) -> f64 {
        match *self {
            LrSchedule::Constant { lr } | LrSchedule::Warmup { lr, .. } => lr,
        }
    }

    /// Learning rate for optimizer step `step` (counted from 1).
    pub fn lr_at(&self, step: u64, _epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Warmup { lr, steps } => {
                if steps == 0 || step >= steps {
                    lr
                } else {
                    lr * step as f64 / steps as f64
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[f64], grads: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.register("w", Tensor::from_f64(&[values.len()], values).unwrap()).unwrap();
        s.grad_mut(id).data_mut().copy_from_slice(grads);
        s
    }

    #[test]
    fn zero_gradient_leaves_weights() {
        for cfg in [OptimConfig::default(), OptimConfig::adam()] {
            let mut s = store_with(&[1.0, -2.0], &[0.0, 0.0]);
            let mut opt = Optimizer::new(cfg, &s);
            opt.step(&mut s, 0.1).unwrap();
            assert_eq!(s.iter().next().unwrap().2.data(), &[1.0, -2.0]);
            assert!(opt.m[0].data().iter().chain(opt.v[0].data()).all(|&x| x == 0.0));
        }
    }

    #[test]
    fn scalar_lamb_step_by_hand() {
        let (w0, g, lr) = (0.7, 0.3, 0.01);
        let mut s = store_with(&[w0], &[g]);
        let cfg = OptimConfig { weight_decay: 0.1, ..OptimConfig::default() };
        let mut opt = Optimizer::new(cfg, &s);
        opt.step(&mut s, lr).unwrap();
        let m: f64 = 0.1 * g;
        let v: f64 = 0.001 * g * g;
        let u = (m / 0.1) / ((v / 0.001).sqrt() + 1e-6) + 0.1 * w0;
        let r = (w0.abs() / u.abs()).clamp(0.0, 10.0);
        let expected = w0 - lr * r * u;
        assert!((s.iter().next().unwrap().2.data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn adam_pure_decay() {
        let mut s = store_with(&[2.0], &[0.0]);
        let mut opt = Optimizer::new(OptimConfig { weight_decay: 0.5, ..OptimConfig::adam() }, &s);
        opt.step(&mut s, 0.1).unwrap();
        assert!((s.iter().next().unwrap().2.data()[0] - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_rejects_step() {
        let mut s = store_with(&[1.0, 1.0], &[0.5, f64::NAN]);
        let mut opt = Optimizer::new(OptimConfig::default(), &s);
        assert!(matches!(opt.step(&mut s, 0.1), Err(Error::NonFiniteGradient(_))));
        assert_eq!(opt.step, 0);
        assert_eq!(s.iter().next().unwrap().2.data(), &[1.0, 1.0]);
    }

    #[test]
    fn clip_three_four_five() {
        let mut s = store_with(&[0.0, 0.0], &[3.0, 4.0]);
        let n = clip_grad_norm(&mut s, 1.0).unwrap();
        assert_eq!(n, 5.0);
        let id = s.ids().next().unwrap();
        assert!((s.grad(id).data()[0] - 0.6).abs() < 1e-15);
        assert!((s.grad(id).data()[1] - 0.8).abs() < 1e-15);
        let mut s = store_with(&[0.0], &[0.1]);
        clip_grad_norm(&mut s, 1.0).unwrap();
        assert_eq!(s.grad(s.ids().next().unwrap()).data(), &[0.1]);
        assert!(clip_grad_norm(&mut s, 0.0).is_err());
    }

    #[test]
    fn schedules() {
        let c = LrSchedule::Constant { lr: 3e-3 };
        assert!((1..500).all(|s| c.lr_at(s, 0) == 3e-3));
        let w = LrSchedule::Warmup { lr: 1e-3, steps: 100 };
        assert!((w.lr_at(50, 0) - 5e-4).abs() < 1e-18);
        assert_eq!(w.lr_at(100, 0), 1e-3);
        assert_eq!(w.lr_at(1000, 3), 1e-3);
    }
}
