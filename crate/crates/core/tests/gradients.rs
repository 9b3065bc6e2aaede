//! Backprop against finite differences in f64 for every layer and for whole
//! SHA-RNN and SHAQ models, five seeds each.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shaq_core::attention::{Attention, AttentionSpec, AttnKind, MemoryCache};
use shaq_core::autograd::Var;
use shaq_core::feedforward::{FeedForward, FeedForwardSpec, FfKind};
use shaq_core::gradcheck::{check_model, finite_diff_check, GradCheckConfig};
use shaq_core::model::BlockStyle;
use shaq_core::nn::{uniform, Ctx, Embedding, LayerNorm, Linear};
use shaq_core::recurrent::{Cell, CellKind};
use shaq_core::{ModelConfig, ParamStore, Result, Tape, Tensor};

const TOL: f64 = 1e-4;
const SEEDS: std::ops::Range<u64> = 0..5;
const T: usize = 4;
const B: usize = 2;
const D: usize = 5;

/// Checks `f` under the scalar loss `Σ f(x) ⊙ R` for a fixed random `R`.
fn check<F>(name: &str, seed: u64, store: &mut ParamStore<f64>, out_shape: &[usize], f: F)
where
    F: for<'t> Fn(&Ctx<'t, '_, f64>) -> Result<Var<'t, f64>>,
{
    let proj = uniform::<f64, _>(out_shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 1000));
    let report = finite_diff_check(
        store,
        |tape: &Tape<f64>, s: &ParamStore<f64>| {
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let ctx = Ctx::new(tape, s, false, &mut r);
            let y = f(&ctx)?;
            Ok(y.mul(ctx.constant(proj.clone()))?.sum())
        },
        &GradCheckConfig { seed, ..GradCheckConfig::default() },
    )
    .unwrap();
    assert!(report.coords_checked > 0);
    assert!(
        report.max_rel_error < TOL,
        "{name} seed {seed}: {:.3e} at {}[{}]",
        report.max_rel_error,
        report.worst_param,
        report.worst_index
    );
}

fn input(seed: u64, shape: &[usize]) -> Tensor<f64> {
    uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 500))
}

#[test]
fn linear_and_layer_norm() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "lin", D, 3, true, &mut rng).unwrap();
        let ln = LayerNorm::new(&mut store, "ln", 3).unwrap();
        // perturb the norm away from its identity initialization
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).starts_with("ln") {
                *store.value_mut(id) = uniform(store.value(id).shape(), 1.0, &mut rng);
            }
        }
        let x = input(seed, &[T, B, D]);
        check("linear+ln", seed, &mut store, &[T, B, 3], |ctx| ln.forward(ctx, lin.forward(ctx, ctx.constant(x.clone()))?));
    }
}

#[test]
fn embedding() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let emb = Embedding::new(&mut store, "emb", 256, D, &mut rng).unwrap();
        let ids: Vec<usize> = (0..T * B).map(|i| (i * 37 + seed as usize) % 256).collect();
        check("embedding", seed, &mut store, &[T, B, D], |ctx| emb.forward(ctx, &ids, &[T, B])?.tanh().mul(emb_scale(ctx)));
    }
}

fn emb_scale<'t>(ctx: &Ctx<'t, '_, f64>) -> Var<'t, f64> {
    ctx.constant(Tensor::full(&[T, B, D], 1.5))
}

#[test]
fn recurrent_cells_with_carried_state() {
    for kind in [CellKind::Lstm, CellKind::Qrnn { window: 1 }, CellKind::Qrnn { window: 2 }, CellKind::Qrnn { window: 3 }] {
        for seed in SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let cell = Cell::new(&mut store, "cell", kind, D, 4, &mut rng).unwrap();
            let (x0, x1) = (input(seed, &[T, B, D]), input(seed + 50, &[T, B, D]));
            // a first window supplies a non-zero carried state
            let state = {
                let tape = Tape::inference();
                let mut r = ChaCha8Rng::seed_from_u64(0);
                let ctx = Ctx::new(&tape, &store, false, &mut r);
                cell.forward(&ctx, ctx.constant(x0), &cell.zero_state(B)).unwrap().1
            };
            check(&format!("{kind:?}"), seed, &mut store, &[T, B, 4], |ctx| {
                Ok(cell.forward(ctx, ctx.constant(x1.clone()), &state)?.0)
            });
        }
    }
}

#[test]
fn attention_heads() {
    for kind in [AttnKind::Gated, AttnKind::Ungated, AttnKind::Mean] {
        for (inner_norm, overparam) in [(true, true), (true, false), (false, true)] {
            for cached in [0, 3] {
                for seed in SEEDS {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let mut store = ParamStore::new();
                    let spec = AttentionSpec { d: D, kind, inner_norm, value_gate_overparam: overparam, weight_dropout: 0.0 };
                    let attn = Attention::new(&mut store, "attn", spec, &mut rng).unwrap();
                    // move gates and norms off their symmetric starting values
                    for id in store.ids().collect::<Vec<_>>() {
                        if store.value(id).shape().len() == 1 {
                            *store.value_mut(id) = uniform(store.value(id).shape(), 1.0, &mut rng);
                        }
                    }
                    let cache = if cached == 0 {
                        MemoryCache::new(10)
                    } else {
                        MemoryCache::with_memory(uniform(&[cached, B, D], 1.0, &mut rng), 10).unwrap()
                    };
                    let x = input(seed, &[T, B, D]);
                    let name = format!("{kind:?} norm={inner_norm} overparam={overparam} cached={cached}");
                    check(&name, seed, &mut store, &[T, B, D], |ctx| attn.attend(ctx, ctx.constant(x.clone()), &cache));
                }
            }
        }
    }
}

#[test]
fn feed_forward_variants() {
    for kind in [FfKind::Boom, FfKind::Fc] {
        for seed in SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let ff = FeedForward::new(&mut store, "ff", FeedForwardSpec { kind, d_model: D, d_inner: 3 * D }, &mut rng).unwrap();
            let x = input(seed, &[T, B, D]);
            check(&format!("{kind:?}"), seed, &mut store, &[T, B, D], |ctx| ff.forward(ctx, ctx.constant(x.clone())));
        }
    }
}

fn toy(base: ModelConfig) -> ModelConfig {
    ModelConfig { d_model: 6, d_inner: 12, bptt: 5, memory_horizon: 13, ..base }
}

fn check_whole(name: &str, cfg: &ModelConfig) {
    for seed in SEEDS {
        let r = check_model(cfg, seed, 2, 16).unwrap();
        assert!(r.max_rel_error < TOL, "{name} seed {seed}: {:.3e} at {}[{}]", r.max_rel_error, r.worst_param, r.worst_index);
    }
}

#[test]
fn sharnn_model() {
    check_whole("sha-rnn", &toy(ModelConfig { n_blocks: 3, attn_layers: vec![2], ..ModelConfig::sharnn() }));
}

#[test]
fn sharnn_ablations() {
    let base = toy(ModelConfig { n_blocks: 2, attn_layers: vec![2], ..ModelConfig::sharnn() });
    check_whole("fc", &ModelConfig { ff: FfKind::Fc, ..base.clone() });
    check_whole("mean", &ModelConfig { attn: AttnKind::Mean, ..base.clone() });
    check_whole("stacked heads", &ModelConfig { attn_layers: vec![2, 2], ..base.clone() });
    check_whole("untied", &ModelConfig { tie_embeddings: false, ..base });
}

#[test]
fn shaq_model() {
    let cfg = toy(ModelConfig { n_blocks: 2, attn_layers: vec![2], ..ModelConfig::shaq() });
    assert_eq!(cfg.block, BlockStyle::Shaq);
    check_whole("shaq", &cfg);
    check_whole("shaq w=3", &ModelConfig { cell: CellKind::Qrnn { window: 3 }, ..cfg });
}
