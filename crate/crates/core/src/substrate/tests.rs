use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Result;

const TOL: f64 = 1e-4;
const EPS: f64 = 1e-4;

/// Contracts an arbitrary node to a scalar with fixed random weights.
fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor4::randn(g.shape(v), 1.0, &mut rng);
    let wv = g.input(w);
    let p = g.mul(v, wv)?;
    Ok(g.sum(p))
}

/// Runs `grad_check` on five random inputs of `shape`.
fn check_op<F>(name: &str, shape: Shape4, f: F)
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    for trial in 0..5 {
        let x = Tensor4::randn(shape, 1.0, &mut rng);
        let err = grad_check(|g, v| {
            let y = f(g, v)?;
            weighted_sum(g, y, 100 + trial)
        }, &x, EPS)
        .unwrap();
        assert!(err < TOL, "{name}: trial {trial} max_rel_err {err}");
    }
}

fn const_leaf(g: &mut Graph, shape: Shape4, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    g.leaf(Tensor4::randn(shape, 1.0, &mut rng), true)
}

#[test]
fn grad_check_sum_of_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor4::randn([2, 3, 2, 2], 2.0, &mut rng);
    let err = grad_check(|g, v| {
        let sq = g.mul(v, v)?;
        Ok(g.sum(sq))
    }, &x, 1e-4)
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn grad_check_constant_function() {
    let x = Tensor4::full([1, 1, 2, 2], 3.0);
    let err = grad_check(|g, _v| Ok(g.input(Tensor4::scalar(4.0))), &x, 1e-4).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn grad_check_rejects_bad_epsilon_and_nan() {
    let x = Tensor4::full([1, 1, 1, 2], 1.0);
    assert!(grad_check(|g, v| Ok(g.sum(v)), &x, 0.0).is_err());
    assert!(grad_check(|g, v| Ok(g.sum(v)), &x, 0.1).is_err());
    let err = grad_check(|g, v| {
        let s = g.sum(v);
        Ok(g.scale(s, f64::NAN))
    }, &x, 1e-4)
    .unwrap_err();
    assert!(matches!(err, crate::Error::Numerical(_)));
}

#[test]
fn conv2d_gradients() {
    check_op("conv_x", [2, 4, 5, 5], |g, x| {
        let k = const_leaf(g, [6, 2, 3, 3], 1);
        g.conv2d(x, k, ConvGeometry::new(2, 1, 2))
    });
    check_op("conv_k", [3, 2, 3, 3], |g, k| {
        let x = const_leaf(g, [2, 6, 6, 5], 2);
        g.conv2d(x, k, ConvGeometry::new(1, 1, 3))
    });
    check_op("conv_pointwise", [2, 3, 4, 4], |g, x| {
        let k = const_leaf(g, [5, 3, 1, 1], 3);
        g.conv2d(x, k, ConvGeometry::new(1, 0, 1))
    });
    check_op("conv_dense_x", [2, 3, 5, 6], |g, x| {
        let k = const_leaf(g, [4, 3, 3, 3], 7);
        g.conv2d(x, k, ConvGeometry::new(2, 1, 1))
    });
    check_op("conv_dense_k", [4, 3, 3, 3], |g, k| {
        let x = const_leaf(g, [2, 3, 5, 6], 8);
        g.conv2d(x, k, ConvGeometry::new(1, 2, 1))
    });
    check_op("conv_pointwise_k", [5, 3, 1, 1], |g, k| {
        let x = const_leaf(g, [2, 3, 4, 5], 6);
        g.conv2d(x, k, ConvGeometry::new(1, 0, 1))
    });
}

#[test]
fn conv_transpose_gradients() {
    check_op("convt_x", [2, 3, 3, 2], |g, x| {
        let k = const_leaf(g, [3, 2, 2, 2], 4);
        g.conv2d_transpose(x, k, 2)
    });
    check_op("convt_k", [3, 2, 3, 3], |g, k| {
        let x = const_leaf(g, [1, 3, 3, 4], 5);
        g.conv2d_transpose(x, k, 2)
    });
}

#[test]
fn elementwise_gradients() {
    check_op("silu", [2, 3, 3, 3], |g, x| Ok(g.silu(x)));
    check_op("scale", [1, 2, 3, 3], |g, x| Ok(g.scale(x, -1.7)));
    check_op("add", [1, 2, 3, 3], |g, x| {
        let c = const_leaf(g, [1, 2, 3, 3], 6);
        g.add(x, c)
    });
    check_op("sub", [1, 2, 3, 3], |g, x| {
        let c = const_leaf(g, [1, 2, 3, 3], 7);
        g.sub(c, x)
    });
    check_op("mul", [1, 2, 3, 3], |g, x| {
        let c = const_leaf(g, [1, 2, 3, 3], 8);
        g.mul(x, c)
    });
    check_op("bias", [1, 3, 1, 1], |g, b| {
        let x = const_leaf(g, [2, 3, 2, 2], 9);
        g.channel_bias(x, b)
    });
}

#[test]
fn normalization_gradients() {
    for training in [true, false] {
        check_op(if training { "bn_x_train" } else { "bn_x_eval" }, [3, 2, 3, 3], |g, x| {
            let gamma = const_leaf(g, [1, 2, 1, 1], 10);
            let beta = const_leaf(g, [1, 2, 1, 1], 11);
            if training {
                g.batch_norm(x, gamma, beta, BnStats::Batch { name: "bn" })
            } else {
                g.batch_norm(x, gamma, beta, BnStats::Running { mean: &[0.3, -0.2], var: &[1.5, 0.7] })
            }
        });
    }
    check_op("bn_gamma", [1, 3, 1, 1], |g, gamma| {
        let x = const_leaf(g, [2, 3, 2, 2], 12);
        let beta = const_leaf(g, [1, 3, 1, 1], 13);
        g.batch_norm(x, gamma, beta, BnStats::Batch { name: "bn" })
    });
    check_op("ln_x", [2, 2, 3, 5], |g, x| {
        let gamma = const_leaf(g, [1, 1, 1, 5], 14);
        let beta = const_leaf(g, [1, 1, 1, 5], 15);
        g.layer_norm(x, gamma, beta)
    });
    check_op("ln_gamma", [1, 1, 1, 4], |g, gamma| {
        let x = const_leaf(g, [1, 2, 3, 4], 16);
        let beta = const_leaf(g, [1, 1, 1, 4], 17);
        g.layer_norm(x, gamma, beta)
    });
}

#[test]
fn linear_and_matmul_gradients() {
    check_op("linear_x", [2, 2, 3, 4], |g, x| {
        let w = const_leaf(g, [1, 1, 4, 3], 18);
        let b = const_leaf(g, [1, 1, 1, 3], 19);
        g.linear(x, w, Some(b))
    });
    check_op("linear_w", [1, 1, 4, 3], |g, w| {
        let x = const_leaf(g, [2, 2, 3, 4], 20);
        g.linear(x, w, None)
    });
    for transpose_b in [false, true] {
        check_op("matmul_a", [2, 2, 3, 4], |g, a| {
            let b = const_leaf(g, if transpose_b { [2, 2, 5, 4] } else { [2, 2, 4, 5] }, 21);
            g.matmul(a, b, transpose_b)
        });
        check_op("matmul_b", if transpose_b { [2, 1, 5, 4] } else { [2, 1, 4, 5] }, |g, b| {
            let a = const_leaf(g, [2, 1, 3, 4], 22);
            g.matmul(a, b, transpose_b)
        });
    }
}

#[test]
fn structural_gradients() {
    check_op("softmax", [2, 2, 3, 5], |g, x| Ok(g.softmax(x)));
    check_op("concat", [2, 2, 3, 3], |g, x| {
        let c = const_leaf(g, [2, 3, 3, 3], 23);
        let y = g.concat_channels(c, x)?;
        let z = g.concat_channels(x, y)?;
        Ok(z)
    });
    check_op("upsample", [1, 2, 3, 2], |g, x| Ok(g.upsample_nearest2x(x)));
    check_op("permute", [2, 3, 4, 5], |g, x| g.permute(x, [2, 0, 3, 1]));
    check_op("reshape", [2, 3, 4, 5], |g, x| g.reshape(x, [6, 1, 5, 4]));
    check_op("gather", [1, 1, 4, 3], |g, t| g.gather_rows(t, &[2, 0, 2, 3]));
}

#[test]
fn composed_graph_gradient() {
    // conv -> bn -> silu -> pointwise -> softmax over width, reused input via concat.
    check_op("composed", [2, 2, 4, 4], |g, x| {
        let k = const_leaf(g, [3, 2, 3, 3], 24);
        let gamma = const_leaf(g, [1, 3, 1, 1], 25);
        let beta = const_leaf(g, [1, 3, 1, 1], 26);
        let y = g.conv2d(x, k, ConvGeometry::new(1, 1, 1))?;
        let y = g.batch_norm(y, gamma, beta, BnStats::Batch { name: "c" })?;
        let y = g.silu(y);
        let y = g.concat_channels(y, x)?;
        let k2 = const_leaf(g, [2, 5, 1, 1], 27);
        let y = g.conv2d(y, k2, ConvGeometry::new(1, 0, 1))?;
        let y = g.add(y, x)?;
        Ok(g.softmax(y))
    });
}

#[test]
fn softmax_rows_are_probability_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let x = Tensor4::randn([3, 2, 4, 7], 5.0, &mut rng);
    let mut g = Graph::eval();
    let v = g.input(x);
    let s = g.softmax(v);
    for row in g.value(s).data().chunks(7) {
        let total: f64 = row.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(row.iter().all(|&p| p > 0.0));
    }
}

#[test]
fn batch_norm_records_unbiased_statistics() {
    let x = Tensor4::from_vec([2, 1, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
    let mut g = Graph::training();
    let xv = g.input(x);
    let gamma = g.input(Tensor4::full([1, 1, 1, 1], 1.0));
    let beta = g.input(Tensor4::zeros([1, 1, 1, 1]));
    let y = g.batch_norm(xv, gamma, beta, BnStats::Batch { name: "n" }).unwrap();
    let rec = &g.batch_stats()[0];
    assert_eq!(rec.name, "n");
    assert_eq!(rec.mean, vec![4.0]);
    assert!((rec.var[0] - 20.0 / 3.0).abs() < 1e-12);
    let out = g.value(y).data();
    assert!((out.iter().sum::<f64>()).abs() < 1e-12);
}

#[test]
fn backward_reaches_only_grad_leaves() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut g = Graph::training();
    let a = g.input(Tensor4::randn([1, 1, 2, 2], 1.0, &mut rng));
    let p = g.param("w", &Tensor4::randn([1, 1, 2, 2], 1.0, &mut rng));
    let m = g.mul(a, p).unwrap();
    let s = g.sum(m);
    g.backward(s).unwrap();
    assert!(g.grad(a).is_none());
    let grads: Vec<_> = g.param_grads().collect();
    assert_eq!(grads.len(), 1);
    assert_eq!(grads[0].1.unwrap(), g.value(a).data());
    let _ = rng.random::<u8>();
}
