//! Finite-difference gradient verification.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::model::{DropoutConfig, Model, ModelConfig};
use crate::nn::Ctx;
use crate::params::ParamStore;
use crate::VOCAB;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Coordinates sampled per parameter tensor; tensors at or below this
    /// size are checked exhaustively.
    pub coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { eps: 1e-3, coords_per_tensor: 24, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    /// Backprop and central-difference values at the worst coordinate.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coords_checked: usize,
}

/// Relative error `|a-n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares backprop gradients of `loss_fn` against the fourth-order central
/// difference `(8(f(θ+ε) − f(θ−ε)) − (f(θ+2ε) − f(θ−2ε))) / 12ε` on sampled
/// coordinates of every parameter. The higher-order stencil allows a larger
/// step, which keeps round-off in `f` from swamping small gradients.
///
/// `loss_fn` must be deterministic (dropout off or driven by a fixed seed
/// inside the closure).
pub fn finite_diff_check<F>(
    store: &mut ParamStore<f64>,
    loss_fn: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &ParamStore<f64>) -> Result<Var<'t, f64>>,
{
    store.zero_grads();
    {
        let tape = Tape::new();
        let loss = loss_fn(&tape, store)?;
        let grads = tape.backward(loss)?;
        grads.accumulate_into(store);
    }
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let tape = Tape::inference();
        let loss = loss_fn(&tape, s)?;
        let v = loss.value().data()[0];
        Ok(v)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coords_checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.value(id).len();
        let coords: Vec<usize> = if n <= cfg.coords_per_tensor {
            (0..n).collect()
        } else {
            sample(&mut rng, n, cfg.coords_per_tensor).into_vec()
        };
        for i in coords {
            let orig = store.value(id).data()[i];
            let mut at = |k: f64| -> Result<f64> {
                store.value_mut(id).data_mut()[i] = orig + k * cfg.eps;
                eval(store)
            };
            let (p1, m1, p2, m2) = (at(1.0)?, at(-1.0)?, at(2.0)?, at(-2.0)?);
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * cfg.eps);
            let analytic = store.grad(id).data()[i];
            let err = relative_error(analytic, numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = store.name(id).to_string();
                report.worst_index = i;
                report.worst_analytic = analytic;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Checks a whole model at the configuration's dimensions in f64 with
/// dropout off. A first window of random bytes fills the carried state and
/// memory caches; the checked loss is the second window's cross-entropy
/// read through that (fixed) state.
pub fn check_model(cfg: &ModelConfig, seed: u64, batch: usize, coords_per_tensor: usize) -> Result<GradCheckReport> {
    let cfg = ModelConfig { dropout: DropoutConfig::none(), ..cfg.clone() };
    let (model, mut store) = Model::build::<f64>(&cfg, seed)?;
    let len = cfg.bptt;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut ids = || (0..len * batch).map(|_| rng.random_range(0..VOCAB)).collect::<Vec<_>>();
    let (warm, inputs, targets) = (ids(), ids(), ids());
    let state = {
        let tape = Tape::inference();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let ctx = Ctx::new(&tape, &store, false, &mut r);
        model.forward(&ctx, &warm, len, batch, &model.init_state(batch))?.1
    };
    let check = GradCheckConfig { coords_per_tensor, seed, ..GradCheckConfig::default() };
    finite_diff_check(
        &mut store,
        |tape, s| {
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let ctx = Ctx::new(tape, s, false, &mut r);
            Ok(model.loss(&ctx, &inputs, &targets, len, batch, &state)?.0)
        },
        &check,
    )
}
