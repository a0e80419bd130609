use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Random weights so that reductions of the op output do not cancel.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(y).to_vec();
    let w = g.constant(Tensor::from_fn(&shape, |_| rng.random_range(0.5..1.5)));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

#[test]
fn matmul_identity() {
    let mut g = Graph::new();
    let eye = g.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
    let a = Tensor::from_fn(&[3, 3], |i| i as f64 * 0.5 - 2.0);
    let av = g.constant(a.clone());
    let y = g.matmul(eye, av).unwrap();
    assert_eq!(g.data(y), a.data());
}

#[test]
fn softmax_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::<f64>::zeros(&[3]));
    let y = g.softmax(x).unwrap();
    for &v in g.data(y) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn l2_distance_hand_value() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![2, 2], vec![0.0, 0.0, 3.0, 4.0]).unwrap());
    let d = g.l2_distance_matrix(x).unwrap();
    assert_eq!(g.data(d), &[0.0, 5.0, 5.0, 0.0]);
}

#[test]
fn shape_errors_name_op_and_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        TensorError::ShapeMismatch {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![2, 3]
        }
    );
    let c = g.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(g.add(a, c), Err(TensorError::ShapeMismatch { op: "add", .. })));
}

#[test]
fn backward_sum_and_square() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_fn(&[4], |i| i as f64));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);

    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.param(Tensor::<f64>::zeros(&[2]));
    assert_eq!(g.backward(x), Err(TensorError::NonScalarLoss(vec![2])));
}

#[test]
fn gradcheck_constant_function_is_zero() {
    let x = Tensor::from_fn(&[3], |i| i as f64);
    let err = gradcheck(
        |g, _x| Ok(g.constant(Tensor::scalar(2.5))),
        &x,
        EPS,
    )
    .unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn gradcheck_sum_of_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[6]);
    let err = gradcheck(
        |g, x| {
            let y = g.mul(x, x)?;
            Ok(g.sum(y))
        },
        &x,
        EPS,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn gradcheck_layer_norm_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[3, 5]);
    let err = gradcheck(
        |g, x| {
            let y = g.layer_norm(x, None, 1e-5)?;
            weighted_sum(g, y, 9)
        },
        &x,
        EPS,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

/// Runs gradcheck over every registered op; used by unit tests and the CLI.
#[test]
fn every_op_passes_gradcheck() {
    let results = crate::verify::op_gradchecks(7).unwrap();
    assert!(results.len() >= 25);
    for (name, err) in results {
        assert!(err < TOL, "{name}: {err}");
    }
}

#[test]
fn softmax_rows_sum_to_one_and_layer_norm_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_fn(&[4, 7], |_| rng.random_range(-20.0..20.0)));
    let y = g.softmax(x).unwrap();
    for row in g.data(y).chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let z = g.layer_norm(x, None, 1e-12).unwrap();
    for row in g.data(z).chunks(7) {
        let m = row.iter().sum::<f64>() / 7.0;
        let v = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 7.0;
        assert!(m.abs() < 1e-10);
        assert!((v - 1.0).abs() < 1e-8);
    }
}

fn conv_oracle(
    x: &[f64],
    w: &[f64],
    (n, ci, h, wd): (usize, usize, usize, usize),
    (co, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w[((o * ci + c) * kh + ky) * kw + kx]
                                    * x[((b * ci + c) * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out[((b * co + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        let x = rand_tensor(&mut rng, &[1, 2, 5, 5]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let y = g.conv2d(xv, wv, None, stride, pad, 1).unwrap();
        let want = conv_oracle(x.data(), w.data(), (1, 2, 5, 5), (3, 3, 3), stride, pad);
        assert_eq!(g.data(y).len(), want.len());
        for (a, b) in g.data(y).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&mut rng, &[2, 3, 6, 6]));
        let w = g.constant(rand_tensor(&mut rng, &[4, 3, 3, 3]));
        let y = g.conv2d(x, w, None, 1, 1, 1).unwrap();
        let y = g.gelu(y);
        let y = g.global_avg_pool(y).unwrap();
        g.data(y).to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn max_pool_routes_gradient_to_argmax() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![1, 1, 2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
    let m = g.max_pool2d(x, 2, 2).unwrap();
    assert_eq!(g.data(m), &[3.0]);
    let s = g.sum(m);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0, 0.0]);
}

#[test]
fn concat_slice_roundtrip() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
    let b = g.constant(Tensor::from_fn(&[2, 2], |i| 10.0 + i as f64));
    let c = g.concat(&[a, b], 1).unwrap();
    assert_eq!(g.shape(c), &[2, 5]);
    let back = g.slice(c, 1, 3, 5).unwrap();
    assert_eq!(g.data(back), g.data(b));
}

#[test]
fn f32_graph_works() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::from_fn(&[2, 2], |i| i as f32));
    let y = g.softmax(x).unwrap();
    let s = g.mean(y);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|v| v.is_finite()));
}

#[test]
fn injected_backward_fault_is_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[5]);
    let check = || {
        gradcheck(
            |g, x| {
                let y = g.gelu(x);
                weighted_sum(g, y, 3)
            },
            &x,
            EPS,
        )
        .unwrap()
    };
    assert!(check() < TOL);
    inject_backward_fault(Some(UnaryKind::Gelu));
    let bad = check();
    inject_backward_fault(None);
    assert!(bad > 0.1, "{bad}");
}
