//! The QRNN layer against a naive per-timestep loop written on plain
//! arrays, across chunk boundaries with carried state.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shaq_core::nn::{uniform, Ctx};
use shaq_core::recurrent::{qrnn_forward, QrnnParams, QrnnState};
use shaq_core::{ParamStore, Tape, Tensor};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One timestep at a time: gather the last `w` inputs (zeros before the
/// stream start), project, activate, pool.
fn naive(x: &[f64], tlen: usize, b: usize, din: usize, d: usize, w: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; b * d];
    let mut out = vec![0.0; tlen * b * d];
    for t in 0..tlen {
        for r in 0..b {
            let mut pre = bias.to_vec();
            for k in 0..w {
                if t < k {
                    continue;
                }
                let xi = &x[((t - k) * b + r) * din..((t - k) * b + r + 1) * din];
                for i in 0..din {
                    for j in 0..3 * d {
                        pre[j] += xi[i] * weight[(k * din + i) * 3 * d + j];
                    }
                }
            }
            for j in 0..d {
                let z = pre[j].tanh();
                let f = sigmoid(pre[d + j]);
                let o = sigmoid(pre[2 * d + j]);
                let cj = f * c[r * d + j] + (1.0 - f) * z;
                c[r * d + j] = cj;
                out[(t * b + r) * d + j] = o * cj;
            }
        }
    }
    out
}

/// Runs the layer over `x` split at `cuts`, carrying state between chunks.
fn chunked(x: &Tensor<f64>, cuts: &[usize], params: &QrnnParams, store: &ParamStore<f64>) -> Vec<f64> {
    let (tlen, b) = (x.shape()[0], x.shape()[1]);
    let mut state = QrnnState::zeros(params.window, b, params.d_in, params.d_h);
    let mut bounds = vec![0];
    bounds.extend(cuts.iter().copied().filter(|&c| c > 0 && c < tlen));
    bounds.sort_unstable();
    bounds.dedup();
    bounds.push(tlen);
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for pair in bounds.windows(2) {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store, false, &mut rng);
        let xs = ctx.constant(x.slice_leading(pair[0], pair[1]));
        let (y, next) = qrnn_forward(&ctx, xs, &state, params).unwrap();
        out.extend_from_slice(y.value().data());
        state = next;
    }
    out
}

fn setup(seed: u64, w: usize, din: usize, d: usize) -> (ParamStore<f64>, QrnnParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let params = QrnnParams::new(&mut store, "q", w, din, d, &mut rng).unwrap();
    // non-zero bias so the bias path is exercised
    let b = uniform::<f64, _>(&[3 * d], 0.5, &mut rng);
    *store.value_mut(params.bias) = b;
    (store, params)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn matches_naive_loop_across_widths_and_chunkings() {
    let (b, din, d, tlen) = (3, 4, 5, 11);
    for w in 1..=4 {
        let (store, params) = setup(w as u64, w, din, d);
        let x = uniform::<f64, _>(&[tlen, b, din], 1.5, &mut ChaCha8Rng::seed_from_u64(99));
        let weight = store.value(params.weight).data().to_vec();
        let bias = store.value(params.bias).data().to_vec();
        let oracle = naive(x.data(), tlen, b, din, d, w, &weight, &bias);
        for cuts in [vec![], vec![1], vec![5], vec![1, 2, 3], vec![2, 4, 6, 8, 10], (1..tlen).collect()] {
            let got = chunked(&x, &cuts, &params, &store);
            assert!(max_diff(&got, &oracle) < 1e-10, "w={w} cuts={cuts:?}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn chunked_layer_equals_oracle(
        seed in 0u64..1000,
        w in 1usize..5,
        tlen in 1usize..14,
        b in 1usize..4,
        cuts in proptest::collection::vec(0usize..14, 0..5),
    ) {
        let (din, d) = (3, 4);
        let (store, params) = setup(seed, w, din, d);
        let x = uniform::<f64, _>(&[tlen, b, din], 2.0, &mut ChaCha8Rng::seed_from_u64(seed + 1));
        let weight = store.value(params.weight).data().to_vec();
        let bias = store.value(params.bias).data().to_vec();
        let oracle = naive(x.data(), tlen, b, din, d, w, &weight, &bias);
        let got = chunked(&x, &cuts, &params, &store);
        prop_assert!(max_diff(&got, &oracle) < 1e-10);
    }
}
