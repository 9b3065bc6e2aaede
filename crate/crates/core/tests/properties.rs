//! Randomized invariants of the engine, the layers and the model registry.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shaq_core::attention::AttnKind;
use shaq_core::data::{batchify, next_window, BatchPlan};
use shaq_core::feedforward::FfKind;
use shaq_core::model::{param_count, BlockStyle, DropoutConfig};
use shaq_core::nn::{uniform, Ctx};
use shaq_core::recurrent::{Cell, CellKind};
use shaq_core::{Model, ModelConfig, ParamStore, Tape, Tensor};

fn tensor(seed: u64, shape: &[usize], bound: f64) -> Tensor<f64> {
    uniform(shape, bound, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn config_strategy() -> impl Strategy<Value = ModelConfig> {
    (
        1usize..4,
        prop_oneof![Just(4usize), Just(6), Just(8)],
        prop_oneof![Just(CellKind::Lstm), (1usize..4).prop_map(|w| CellKind::Qrnn { window: w })],
        any::<bool>(),
        proptest::collection::vec(1usize..4, 0..3),
        prop_oneof![Just(AttnKind::Gated), Just(AttnKind::Ungated), Just(AttnKind::Mean)],
        prop_oneof![Just(FfKind::Boom), Just(FfKind::Fc), Just(FfKind::None)],
        (any::<bool>(), any::<bool>(), any::<bool>()),
    )
        .prop_map(|(n, d, cell, shaq, layers, attn, ff, (tie, overparam, inner))| ModelConfig {
            d_model: d,
            n_blocks: n,
            cell,
            block: if shaq { BlockStyle::Shaq } else { BlockStyle::ShaRnn },
            attn_layers: layers,
            attn,
            ff: if shaq { FfKind::None } else { ff },
            d_inner: 2 * d,
            dropout: DropoutConfig::none(),
            bptt: 5,
            memory_horizon: 12,
            tie_embeddings: tie,
            value_gate_overparam: overparam,
            attn_inner_norm: inner,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn param_count_equals_registry(cfg in config_strategy()) {
        prop_assume!(cfg.validate().is_ok());
        let (_, store) = Model::build::<f32>(&cfg, 0).unwrap();
        prop_assert_eq!(param_count(&cfg).unwrap().total, store.num_scalars());
    }

    #[test]
    fn softmax_rows_are_distributions(seed in 0u64..10_000, rows in 1usize..5, cols in 1usize..9, scale in 0.1f64..50.0) {
        let tape = Tape::new();
        let y = tape.constant(tensor(seed, &[rows, cols], scale)).softmax(1).unwrap().to_tensor();
        for r in y.data().chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn layer_norm_ignores_row_shift(seed in 0u64..10_000, shift in -100.0f64..100.0) {
        let tape = Tape::new();
        let x = tensor(seed, &[3, 7], 2.0);
        let mut xs = x.clone();
        xs.data_mut().iter_mut().for_each(|v| *v += shift);
        let g = tape.constant(tensor(seed + 1, &[7], 1.0));
        let b = tape.constant(tensor(seed + 2, &[7], 1.0));
        let a = tape.constant(x).layer_norm(g, b, 1e-5).unwrap().to_tensor();
        let c = tape.constant(xs).layer_norm(g, b, 1e-5).unwrap().to_tensor();
        prop_assert!(a.max_abs_diff(&c) < 1e-9);
    }

    /// With gates in [0, 1], each pooled cell is a convex combination of the
    /// initial cell and the candidates, so it stays within their range.
    #[test]
    fn fo_pool_stays_in_convex_hull(seed in 0u64..10_000, tlen in 1usize..8) {
        let (b, d) = (2, 3);
        let tape = Tape::new();
        let z = tape.constant(tensor(seed, &[tlen, b, d], 3.0)).tanh();
        let f = tape.constant(tensor(seed + 1, &[tlen, b, d], 4.0)).sigmoid();
        let o = tape.constant(tensor(seed + 2, &[tlen, b, d], 4.0)).sigmoid();
        let c0 = tensor(seed + 3, &[b, d], 1.0);
        let (h, c_last) = tape.fo_pool(z, f, o, &c0).unwrap();
        let (zv, ov) = (z.to_tensor(), o.to_tensor());
        let bound = zv.data().iter().chain(c0.data()).fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(c_last.data().iter().all(|c| c.abs() <= bound + 1e-12));
        for ((hv, &og), _) in h.to_tensor().data().iter().zip(ov.data()).zip(0..) {
            prop_assert!(hv.abs() <= og * bound + 1e-12);
        }
    }

    /// Running two windows with carried state equals one long window.
    #[test]
    fn cells_are_chunking_invariant(seed in 0u64..10_000, split in 1usize..9, w in 1usize..4, lstm in any::<bool>()) {
        let kind = if lstm { CellKind::Lstm } else { CellKind::Qrnn { window: w } };
        let mut store = ParamStore::new();
        let cell = Cell::new(&mut store, "c", kind, 4, 5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let x = tensor(seed + 1, &[9, 2, 4], 1.0);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false, &mut r);
        let (whole, s_whole) = cell.forward(&ctx, ctx.constant(x.clone()), &cell.zero_state(2)).unwrap();
        let (a, s) = cell.forward(&ctx, ctx.constant(x.slice_leading(0, split)), &cell.zero_state(2)).unwrap();
        let (b, s_split) = cell.forward(&ctx, ctx.constant(x.slice_leading(split, 9)), &s).unwrap();
        let joined = Tensor::concat_leading(&[&a.to_tensor(), &b.to_tensor()]).unwrap();
        prop_assert!(joined.max_abs_diff(&whole.to_tensor()) < 1e-12);
        match (s_whole, s_split) {
            (shaq_core::recurrent::CellState::Lstm(p), shaq_core::recurrent::CellState::Lstm(q)) => {
                prop_assert!(p.h.max_abs_diff(&q.h) < 1e-12 && p.c.max_abs_diff(&q.c) < 1e-12);
            }
            (shaq_core::recurrent::CellState::Qrnn(p), shaq_core::recurrent::CellState::Qrnn(q)) => {
                prop_assert!(p.c.max_abs_diff(&q.c) < 1e-12 && p.tail.max_abs_diff(&q.tail) < 1e-12);
            }
            _ => prop_assert!(false, "state kinds differ"),
        }
    }

    /// A weight used twice in one graph receives the sum of the gradients it
    /// would get from two separate graphs.
    #[test]
    fn shared_weight_gradient_is_sum_of_unshared(seed in 0u64..10_000) {
        let w = tensor(seed, &[3, 4], 1.0);
        let (x1, x2) = (tensor(seed + 1, &[2, 3], 1.0), tensor(seed + 2, &[5, 3], 1.0));
        let grad = |xs: &[&Tensor<f64>]| {
            let tape = Tape::new();
            let wv = tape.leaf(w.clone());
            let mut loss = None;
            for x in xs {
                let l = tape.constant((*x).clone()).matmul(wv).unwrap().tanh().sum();
                loss = Some(match loss { None => l, Some(p) => l.add(p).unwrap() });
            }
            tape.backward(loss.unwrap()).unwrap().wrt(wv).unwrap().clone()
        };
        let shared = grad(&[&x1, &x2]);
        let (g1, g2) = (grad(&[&x1]), grad(&[&x2]));
        let sum: Vec<f64> = g1.data().iter().zip(g2.data()).map(|(a, b)| a + b).collect();
        prop_assert!(shared.data().iter().zip(&sum).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    /// Windows tile each track without gaps or overlaps and targets are the
    /// inputs shifted by one.
    #[test]
    fn windows_tile_the_stream(seed in 0u64..10_000, n in 50usize..2000, batch in 1usize..6, center in 5usize..40) {
        let bytes: Vec<u8> = (0..n).map(|i| (i * 31 + seed as usize) as u8).collect();
        let data = batchify(&bytes, batch).unwrap();
        let plan = BatchPlan::new(batch, center);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cursor = 0;
        while let Some(w) = next_window(&data, &plan, cursor, &mut rng) {
            prop_assert_eq!(w.start, cursor);
            prop_assert!(w.len >= 5);
            prop_assert_eq!(&w.inputs[batch..], &w.targets[..(w.len - 1) * batch]);
            cursor += w.len;
        }
        prop_assert!(data.rows.saturating_sub(1) - cursor < 5);
    }
}
