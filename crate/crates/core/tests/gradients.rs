use faultsam::tensor::gradcheck::{grad_check, suite, CheckOp};
use faultsam::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn every_op_passes_central_differences_on_five_seeds() {
    for (op, shapes) in suite() {
        let refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        for seed in 0..5 {
            let err = grad_check(op, &refs, seed).unwrap();
            assert!(err < 1e-4, "{} seed {seed}: {err:e}", op.name());
        }
    }
}

#[test]
fn matmul_and_identity_examples() {
    assert!(grad_check(CheckOp::MatMul, &[&[3, 4], &[4, 2]], 0).unwrap() < 1e-6);
    assert_eq!(grad_check(CheckOp::Identity, &[&[5]], 0).unwrap(), 0.0);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for (stride, k, h) in [(2, 2, 8), (1, 3, 6), (2, 3, 7)] {
        let (c, o) = (3, 4);
        let oh = (h - k) / stride + 1;
        let x = Tensor::from_fn(&[1, c, h, h], |_| rng.random_range(-1.0..1.0));
        let kern = Tensor::from_fn(&[o, c, k, k], |_| rng.random_range(-1.0..1.0));
        let y = Tensor::from_fn(&[1, o, oh, oh], |_| rng.random_range(-1.0..1.0));
        let mut g = Graph::<f64>::new();
        let (xv, kv, yv) = (g.constant(x.clone()), g.constant(kern), g.constant(y.clone()));
        let conv = g.conv2d(xv, kv, None, stride, 0).unwrap();
        let convt = g.conv_transpose2d(yv, kv, None, stride).unwrap();
        assert_eq!(g.shape(convt), x.shape());
        let lhs = dot(g.value(conv).data(), y.data());
        let rhs = dot(x.data(), g.value(convt).data());
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}
