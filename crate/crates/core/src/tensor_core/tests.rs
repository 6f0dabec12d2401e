use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use graph::softmax_rows;

fn t2(rows: usize, cols: usize, data: &[f32]) -> Tensor {
    Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
}

fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] as f64 * b.data()[p * n + j] as f64;
            }
        }
    }
    out
}

#[test]
fn matmul_identity() {
    let eye = t2(2, 2, &[1.0, 0.0, 0.0, 1.0]);
    let b = t2(2, 2, &[3.0, 4.0, 5.0, 6.0]);
    assert_eq!(matmul(&eye, &b).unwrap().data(), &[3.0, 4.0, 5.0, 6.0]);
}

#[test]
fn matmul_row_by_column() {
    let a = t2(1, 2, &[1.0, 2.0]);
    let b = t2(2, 1, &[3.0, 4.0]);
    let c = matmul(&a, &b).unwrap();
    assert_eq!(c.shape(), &[1, 1]);
    assert_eq!(c.data(), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = Tensor::randn(&[4, 4], 1.0, &mut rng);
    let b = Tensor::randn(&[4, 4], 1.0, &mut rng);
    let c = matmul(&a, &b).unwrap();
    for (x, y) in c.data().iter().zip(triple_loop(&a, &b)) {
        assert!((*x as f64 - y).abs() <= 1e-6, "{x} vs {y}");
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[2, 3]);
    match matmul(&a, &b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::new();
    let theta = g.param(Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap());
    let loss = g.sum(theta).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(theta).unwrap(), &[1.0; 6]);
}

#[test]
fn backward_of_sum_of_squares() {
    let mut g = Graph::new();
    let theta = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let sq = g.mul(theta, theta).unwrap();
    let loss = g.sum(sq).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(theta).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn repeated_backward_accumulates_until_zeroed() {
    let mut g = Graph::new();
    let theta = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let sq = g.mul(theta, theta).unwrap();
    let loss = g.sum(sq).unwrap();
    g.backward(loss).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(theta).unwrap(), &[4.0, 8.0, 12.0]);
    g.zero_grads();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(theta).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let theta = g.param(Tensor::from_vec(vec![1.0, 2.0]));
    let y = g.scale(theta, 2.0).unwrap();
    assert!(matches!(g.backward(y), Err(Error::Contract(_))));
}

#[test]
fn constants_receive_no_grad() {
    let mut g = Graph::new();
    let theta = g.param(Tensor::from_vec(vec![1.0, 2.0]));
    let c = g.constant(Tensor::from_vec(vec![3.0, 4.0]));
    let y = g.mul(theta, c).unwrap();
    let loss = g.sum(y).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(theta).unwrap(), &[3.0, 4.0]);
    assert!(g.grad(c).is_none());
}

#[test]
fn non_finite_values_are_errors() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_vec(vec![f32::MAX, 1.0]));
    assert!(matches!(g.scale(a, 10.0), Err(Error::Numeric(_))));
}

#[test]
fn kl_of_identical_logits_is_zero() {
    let l = Tensor::from_vec(vec![0.3, -1.2, 2.5, 0.0]);
    let kl = kl_divergence(&l, &l).unwrap().item().unwrap();
    assert!(kl.abs() <= 1e-9);
}

#[test]
fn kl_two_way_closed_form() {
    // teacher [10, 0], student [0, 10]
    let teacher = Tensor::from_vec(vec![10.0, 0.0]);
    let student = Tensor::from_vec(vec![0.0, 10.0]);
    let pt1 = 1.0 / (1.0 + (-10.0f64).exp());
    let pt2 = 1.0 - pt1;
    let ps1 = pt2;
    let ps2 = pt1;
    let expected = pt1 * (pt1 / ps1).ln() + pt2 * (pt2 / ps2).ln();
    let kl = kl_divergence(&student, &teacher).unwrap().item().unwrap() as f64;
    assert!((kl - expected).abs() <= 1e-5 * expected, "{kl} vs {expected}");
}

#[test]
fn kl_size_mismatch() {
    let a = Tensor::from_vec(vec![0.0; 3]);
    let b = Tensor::from_vec(vec![0.0; 4]);
    assert!(matches!(kl_divergence(&a, &b), Err(Error::Dimension { .. })));
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::inference();
    let x = g.constant(Tensor::randn(&[5, 17], 4.0, &mut rng));
    let y = g.softmax(x).unwrap();
    for row in g.value(y).data().chunks(17) {
        let s: f32 = row.iter().sum();
        assert!((s - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn layer_norm_standardizes_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::inference();
    let x = g.constant(Tensor::randn(&[6, 32], 3.0, &mut rng));
    let s = g.constant(Tensor::full(&[32], 1.0));
    let b = g.constant(Tensor::zeros(&[32]));
    let y = g.layer_norm(x, s, b).unwrap();
    for row in g.value(y).data().chunks(32) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / 32.0;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 32.0;
        assert!(mean.abs() <= 1e-5);
        assert!((var - 1.0).abs() <= 1e-4);
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::inference();
        let x = g.constant(Tensor::randn(&[8, 16], 1.0, &mut rng));
        let w = g.constant(Tensor::randn(&[2, 16, 4], 1.0, &mut rng));
        let q = g.head_project(x, w).unwrap();
        let a = g.causal_attention(q, q, q, 2, 4, 2, 0.5).unwrap();
        let y = g.gelu(a).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run().data(), run().data());
}

#[test]
fn hinge_inactive_when_correct_is_argmax() {
    let mut g = Graph::new();
    let s = g.param(Tensor::new(vec![1, 3], vec![0.1, 3.0, 0.2]).unwrap());
    let h = g.pairwise_hinge(s, &[1]).unwrap();
    assert_eq!(g.value(h).item().unwrap(), 0.0);
}

proptest! {
    #[test]
    fn kl_is_non_negative(pair in prop::collection::vec((-20.0f32..20.0, -20.0f32..20.0), 2..40)) {
        let (s, t): (Vec<f32>, Vec<f32>) = pair.into_iter().unzip();
        let kl = kl_divergence(&Tensor::from_vec(s), &Tensor::from_vec(t)).unwrap().item().unwrap();
        prop_assert!(kl >= 0.0);
    }

    #[test]
    fn softmax_is_a_distribution(row in prop::collection::vec(-50.0f32..50.0, 1..64)) {
        let n = row.len();
        let p = softmax_rows(&row, n);
        let s: f32 = p.iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-5);
        prop_assert!(p.iter().all(|v| *v >= 0.0));
    }
}
