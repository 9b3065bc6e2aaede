use super::*;
use crate::nn::uniform;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn matmul_identity_and_hand_product() {
    let tape = Tape::new();
    let a = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let eye = tape.constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
    assert_eq!(a.matmul(eye).unwrap().value().data(), a.value().data());
    let b = tape.constant(t(&[3, 2], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
    let c = a.matmul(b).unwrap();
    assert_eq!(c.shape(), vec![2, 2]);
    assert_eq!(c.value().data(), &[58.0, 64.0, 139.0, 154.0]);
}

#[test]
fn batched_matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (bt, m, k, n) = (3, 4, 5, 2);
    let a = uniform::<f64, _>(&[bt, m, k], 1.0, &mut rng);
    let b = uniform::<f64, _>(&[bt, k, n], 1.0, &mut rng);
    let tape = Tape::new();
    let c = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap();
    let c = c.value();
    for x in 0..bt {
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    s += a.data()[x * m * k + i * k + l] * b.data()[x * k * n + l * n + j];
                }
                assert!((c.data()[x * m * n + i * n + j] - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn softmax_rows() {
    let tape = Tape::new();
    let x = tape.constant(t(&[2, 3], &[0.0, 0.0, 0.0, 1.0, 2.0, 3.0]));
    let y = x.softmax(1).unwrap().to_tensor();
    assert!(close(&y.data()[..3], &[1.0 / 3.0; 3], 1e-15));
    let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
    let z: f64 = e.iter().sum();
    assert!(close(&y.data()[3..], &e.iter().map(|v| v / z).collect::<Vec<_>>(), 1e-15));
    // a huge common offset neither overflows nor changes the result
    let shifted = tape.constant(t(&[3], &[1001.0, 1002.0, 1003.0])).softmax(0).unwrap();
    assert!(close(shifted.value().data(), &y.data()[3..], 1e-12));
}

#[test]
fn causal_softmax_hides_future_columns() {
    let tape = Tape::new();
    let x = tape.constant(t(&[1, 2, 3], &[5.0, 1.0, 9.0, 0.0, 0.0, 7.0]));
    let y = x.causal_softmax(0).unwrap();
    assert_eq!(&y.value().data()[..3], &[1.0, 0.0, 0.0]);
    assert!(close(&y.value().data()[3..], &[0.5, 0.5, 0.0], 1e-15));
}

#[test]
fn fan_out_accumulates() {
    // y = x·x + 3x at x = 2: dy/dx = 2x + 3 = 7
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(2.0));
    let y = x.mul(x).unwrap().add(x.scale(3.0)).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[7.0]);
}

#[test]
fn constants_get_no_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]));
    let c = tape.constant(t(&[2], &[3.0, 4.0]));
    let g = tape.backward(x.mul(c).unwrap().sum()).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[3.0, 4.0]);
    assert!(g.wrt(c).is_none());
    assert!(!x.detach().requires_grad());
}

#[test]
fn non_scalar_loss_is_rejected() {
    let tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn inference_tape_records_nothing_differentiable() {
    let tape = Tape::<f64>::inference();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]));
    assert!(!x.requires_grad());
    assert!(!x.tanh().requires_grad());
}

#[test]
fn dropout_statistics() {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 100_000;
    let x = tape.constant(Tensor::full(&[n], 1.0));
    let v = x.dropout(0.3, true, &mut rng).unwrap().to_tensor();
    let zeros = v.data().iter().filter(|&&a| a == 0.0).count() as f64 / n as f64;
    assert!((zeros - 0.3).abs() < 0.01, "{zeros}");
    let mean = v.data().iter().sum::<f64>() / n as f64;
    assert!((mean - 1.0).abs() < 0.02, "{mean}");
    assert!(v.data().iter().all(|&a| a == 0.0 || (a - 1.0 / 0.7).abs() < 1e-12));
    // eval mode and p = 0 are the identity
    assert_eq!(x.dropout(0.3, false, &mut rng).unwrap().id(), x.id());
    assert_eq!(x.dropout(0.0, true, &mut rng).unwrap().id(), x.id());
    assert!(x.dropout(1.0, true, &mut rng).is_err());
}

#[test]
fn cross_entropy_cases() {
    let tape = Tape::<f64>::new();
    let uniform_logits = tape.constant(Tensor::zeros(&[4, 256]));
    let l = uniform_logits.cross_entropy(&[0, 1, 2, 255]).unwrap();
    assert!((l.value().data()[0] - 256f64.ln()).abs() < 1e-12);
    let mut sharp = vec![0.0; 2 * 3];
    sharp[1] = 100.0;
    sharp[3 + 2] = 100.0;
    let l = tape.constant(t(&[2, 3], &sharp)).cross_entropy(&[1, 2]).unwrap();
    assert!(l.value().data()[0] < 1e-40);
    assert!(matches!(
        tape.constant(t(&[1, 3], &[0.0; 3])).cross_entropy(&[3]),
        Err(Error::TargetOutOfRange { id: 3, vocab: 3 })
    ));
    // gradient is softmax minus one-hot, averaged over rows
    let x = tape.leaf(t(&[1, 2], &[0.0, 0.0]));
    let g = tape.backward(x.cross_entropy(&[0]).unwrap()).unwrap();
    assert!(close(g.wrt(x).unwrap().data(), &[-0.5, 0.5], 1e-15));
}

/// Standard normal CDF by composite Simpson integration of the density.
fn normal_cdf(x: f64) -> f64 {
    let lo = -12.0;
    let n = 20_000;
    let h = (x - lo) / n as f64;
    let pdf = |u: f64| (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(lo) + pdf(x);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * pdf(lo + i as f64 * h);
    }
    s * h / 3.0
}

#[test]
fn gelu_tracks_exact_cdf_form() {
    let tape = Tape::new();
    let xs: Vec<f64> = (-40..=40).map(|i| i as f64 * 0.1).collect();
    let y = tape.constant(t(&[xs.len()], &xs)).gelu();
    for (&x, &g) in xs.iter().zip(y.value().data()) {
        assert!((g - x * normal_cdf(x)).abs() < 1e-3, "x={x}");
    }
    assert_eq!(y.value().data()[40], 0.0);
}

#[test]
fn layer_norm_cases() {
    let tape = Tape::new();
    let ones = tape.constant(Tensor::full(&[4], 1.0));
    let zeros = tape.constant(Tensor::zeros(&[4]));
    let x = tape.constant(t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -3.0, 0.5, 8.0, 2.0]));
    let y = x.layer_norm(ones, zeros, 1e-12).unwrap();
    for row in y.value().data().chunks(4) {
        let mu = row.iter().sum::<f64>() / 4.0;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 4.0;
        assert!(mu.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
    }
    // a constant row maps to beta
    let beta = tape.constant(t(&[4], &[0.1, 0.2, 0.3, 0.4]));
    let c = tape.constant(Tensor::full(&[1, 4], 7.0)).layer_norm(ones, beta, 1e-5).unwrap();
    assert!(close(c.value().data(), &[0.1, 0.2, 0.3, 0.4], 1e-12));
    assert!(x.layer_norm(tape.constant(Tensor::zeros(&[3])), zeros, 1e-5).is_err());
}

#[test]
fn normalize_rows_matches_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = uniform::<f64, _>(&[5, 3, 6], 2.0, &mut rng);
    let tape = Tape::new();
    let ln = tape
        .constant(x.clone())
        .layer_norm(tape.constant(Tensor::full(&[6], 1.0)), tape.constant(Tensor::zeros(&[6])), 1e-5)
        .unwrap();
    assert_eq!(normalize_rows(&x, 1e-5).data(), ln.value().data());
}

#[test]
fn causal_conv_rejects_bad_tail() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(&[3, 2, 4]));
    let w = tape.leaf(Tensor::zeros(&[2, 4, 6]));
    let b = tape.leaf(Tensor::zeros(&[6]));
    assert!(tape.causal_conv(x, &Tensor::zeros(&[2, 2, 4]), w, b).is_err());
    assert!(tape.causal_conv(x, &Tensor::zeros(&[1, 2, 4]), w, b).is_ok());
}
