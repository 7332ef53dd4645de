use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t64(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    t64(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Random values bounded away from zero so ReLU kinks are far from `eps`.
fn random_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    random(rng, shape).map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

/// `sum(w ∘ y)` with fixed random `w`, so every output coordinate carries a distinct weight.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> crate::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, g.shape(y));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

#[test]
fn global_avg_pool_of_constant() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[2, 3, 4], 5.0f64));
    let p = g.global_avg_pool(x).unwrap();
    assert_eq!(g.value(p).data(), &[5.0, 5.0]);
}

#[test]
fn slice_rows_shape() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::<f32>::zeros(&[2, 6, 2]));
    // rows 3..4 in 1-based inclusive terms
    let s = g.slice_rows(x, 2, 2).unwrap();
    assert_eq!(g.shape(s), &[2, 2, 2]);
}

#[test]
fn conv_of_ones_is_nine() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 1, 5, 5], 1.0f64));
    let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0f64));
    let y = g.conv2d(x, w, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 3, 3]);
    assert!(g.value(y).data().iter().all(|&v| v == 9.0));
}

/// Direct evaluation of the convolution sum, one output at a time.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((b * c + ic) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((oc * c + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    t64(&[n, o, oh, ow], out)
}

#[test]
fn conv_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(stride, pad, h, w) in &[(1, 0, 5, 5), (1, 1, 6, 4), (2, 1, 8, 6), (2, 0, 7, 5), (2, 1, 5, 3)] {
        let x = random(&mut rng, &[2, 3, h, w]);
        let k = random(&mut rng, &[4, 3, 3, 3]);
        let mut g = Graph::new();
        let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
        let y = g.conv2d(xv, kv, stride, pad).unwrap();
        let expect = conv_oracle(&x, &k, stride, pad);
        assert_eq!(g.shape(y), expect.shape());
        for (a, b) in g.value(y).data().iter().zip(expect.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }
}

#[test]
fn backward_of_sum_of_squares() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_slice(&[1.0f64, 2.0, 3.0]));
    let sq = g.mul(x, x).unwrap();
    let l = g.sum(sq).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn dead_relu_has_zero_gradient() {
    for v in [-1.0f64, 0.0] {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(v));
        let r = g.relu(x).unwrap();
        g.backward(r).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0]);
    }
}

#[test]
fn distance_gradient_is_unit_direction() {
    let mut g = Graph::new();
    let a = g.param(Tensor::from_slice(&[3.0f64, 0.0]));
    let b = g.constant(Tensor::from_slice(&[0.0f64, 4.0]));
    let d = g.euclidean_distance(a, b).unwrap();
    assert_eq!(g.value(d).item().unwrap(), 5.0);
    g.backward(d).unwrap();
    let grad = g.grad(a).unwrap();
    assert_abs_diff_eq!(grad.data()[0], 0.6, epsilon = 1e-12);
    assert_abs_diff_eq!(grad.data()[1], -0.8, epsilon = 1e-12);
}

#[test]
fn distance_to_self_is_zero_with_finite_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(&[2, 3], vec![0.5f32; 6]).unwrap());
    let d = g.pair_distances(x, &[(0, 1)], false).unwrap();
    assert_eq!(g.value(d).data(), &[0.0]);
    let s = g.sum(d).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().is_finite());
}

#[test]
fn backward_errors() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_slice(&[1.0f64, 2.0]));
    let y = g.scale(x, 2.0).unwrap();
    assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::GraphConsumed)));

    let mut g = Graph::new();
    let c = g.constant(Tensor::from_slice(&[1.0f64]));
    let s = g.sum(c).unwrap();
    assert!(matches!(g.backward(s), Err(Error::Detached)));
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    let msg = g.add(a, b).unwrap_err().to_string();
    assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    let c = g.constant(Tensor::zeros(&[2, 2]));
    assert!(g.matmul(a, c).unwrap_err().to_string().contains("matmul"));
}

#[test]
fn checked_graph_flags_overflow() {
    let mut g = Graph::<f32>::checked();
    let x = g.constant(Tensor::from_slice(&[1e30f32]));
    assert!(g.mul(x, x).is_err());
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::from_slice(&[1e30f32]));
    assert!(g.mul(x, x).is_ok());
}

#[test]
fn gradcheck_quadratic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[7]);
    let err = finite_difference_check(
        |g, x| {
            let sq = g.mul(x, x)?;
            g.sum(sq)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-7, "{err}");
}

#[test]
fn gradcheck_rejects_vector_output() {
    let x = t64(&[2], vec![1.0, 2.0]);
    let res = finite_difference_check(|g, x| g.scale(x, 2.0), &x, 1e-5);
    assert!(matches!(res, Err(Error::NonScalarLoss(_))));
}

#[test]
fn gradcheck_softmax_ce() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let x = random(&mut rng, &[4, 6]).map(|v| 3.0 * v);
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..6)).collect();
        let err =
            finite_difference_check(|g, x| g.softmax_cross_entropy(x, &labels), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }
}

#[test]
fn gradcheck_each_op_smoke() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_off_zero(&mut rng, &[3, 4, 4, 2]);
    let w = random(&mut rng, &[2, 4, 3, 3]);
    let checks: Vec<(&str, Box<dyn Fn(&mut Graph<f64>, Var) -> crate::Result<Var>>)> = vec![
        ("conv", Box::new(move |g, x| {
            let w = g.constant(w.clone());
            let y = g.conv2d(x, w, 2, 1)?;
            project(g, y, 1)
        })),
        ("bn", Box::new(|g, x| {
            let gam = g.constant(Tensor::from_slice(&[1.5, 0.7, 1.0, 2.0]));
            let bet = g.constant(Tensor::from_slice(&[0.1, -0.2, 0.0, 0.3]));
            let (y, _) = g.batch_norm_train(x, gam, bet, 1e-5)?;
            project(g, y, 2)
        })),
        ("pools", Box::new(|g, x| {
            let a = g.global_max_pool(x)?;
            let b = g.global_avg_pool(x)?;
            let s = g.add(a, b)?;
            project(g, s, 3)
        })),
        ("slice+concat", Box::new(|g, x| {
            let a = g.slice_rows(x, 1, 2)?;
            let b = g.slice_rows(x, 0, 3)?;
            let c = g.concat(&[a, b], 2)?;
            project(g, c, 4)
        })),
    ];
    for (name, f) in checks {
        let report = finite_difference_report(f, &x, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-5, "{name}: {report:?}");
        assert!(report.checked > 0);
    }
}

#[test]
fn batch_norm_normalizes_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random(&mut rng, &[16, 5]).map(|v| 3.0 * v + 2.0);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let gam = g.constant(Tensor::full(&[5], 1.0));
    let bet = g.constant(Tensor::zeros(&[5]));
    let (y, stats) = g.batch_norm_train(xv, gam, bet, 1e-5).unwrap();
    assert_eq!(stats.count, 16);
    let y = g.value(y).data();
    for c in 0..5 {
        let col: Vec<f64> = (0..16).map(|r| y[r * 5 + c]).collect();
        let mean = col.iter().sum::<f64>() / 16.0;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn batch_norm_eval_uses_given_stats() {
    let mut g = Graph::new();
    let x = g.constant(t64(&[2, 2], vec![1.0, 4.0, 3.0, 8.0]));
    let gam = g.constant(t64(&[2], vec![2.0, 1.0]));
    let bet = g.constant(t64(&[2], vec![0.5, 0.0]));
    let y = g.batch_norm_eval(x, gam, bet, &[1.0, 4.0], &[4.0, 16.0], 0.0).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.0, 2.5, 1.0]);
}

proptest! {
    #[test]
    fn max_pool_dominates_avg_pool(data in prop::collection::vec(-100.0f64..100.0, 24)) {
        let mut g = Graph::new();
        let x = g.constant(t64(&[2, 3, 4], data));
        let mx = g.global_max_pool(x).unwrap();
        let av = g.global_avg_pool(x).unwrap();
        for (m, a) in g.value(mx).data().iter().zip(g.value(av).data()) {
            prop_assert!(m >= a);
        }
    }

    #[test]
    fn concat_then_narrow_round_trips(
        a in prop::collection::vec(-10.0f64..10.0, 6),
        b in prop::collection::vec(-10.0f64..10.0, 9),
    ) {
        let mut g = Graph::new();
        let av = g.constant(t64(&[3, 2], a.clone()));
        let bv = g.constant(t64(&[3, 3], b.clone()));
        let c = g.concat(&[av, bv], 1).unwrap();
        let a2 = g.narrow(c, 1, 0, 2).unwrap();
        let b2 = g.narrow(c, 1, 2, 3).unwrap();
        prop_assert_eq!(g.value(a2).data(), &a[..]);
        prop_assert_eq!(g.value(b2).data(), &b[..]);
    }

    #[test]
    fn softmax_ce_is_shift_invariant(
        logits in prop::collection::vec(-20.0f64..20.0, 5),
        label in 0usize..5,
        shift in -50.0f64..50.0,
    ) {
        let mut g = Graph::new();
        let x = g.constant(t64(&[5], logits.clone()));
        let xs = g.add_scalar(x, shift).unwrap();
        let l1 = g.softmax_cross_entropy(x, &[label]).unwrap();
        let l2 = g.softmax_cross_entropy(xs, &[label]).unwrap();
        let (l1, l2) = (g.value(l1).item().unwrap(), g.value(l2).item().unwrap());
        prop_assert!((l1 - l2).abs() <= 1e-6);
    }
}

#[test]
fn shape_and_data_must_agree() {
    assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
    assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
    assert!(Tensor::<f32>::new(&[2, 0], vec![]).is_err());
}

#[test]
fn stack_and_index_are_inverse() {
    let a = Tensor::<f64>::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = a.map(|v| v * 10.0);
    let s = Tensor::stack(&[&a, &b]).unwrap();
    assert_eq!(s.shape(), &[2, 2, 2]);
    assert_eq!(s.index_outer(1).unwrap(), b);
}
