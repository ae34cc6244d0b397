use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{DfrError, Result};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, &mut rng(seed)).with_grad()
}

/// Projects an op's output onto fixed random weights so every output
/// coordinate contributes to the scalar being differentiated.
fn check_op<F>(params: Vec<Tensor>, build: F) -> f64
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.leaf(p)).collect();
        let out = build(&mut g, &vars)?;
        let n = g.value(out).len();
        let mut r = rng(99);
        let w: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let loss = g.weighted_sum(out, &w)?;
        let grads = g.backward(loss)?;
        let gs = vars
            .iter()
            .zip(ps)
            .map(|(v, p)| grads.get(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; p.numel()]))
            .collect();
        Ok((g.scalar(loss), gs))
    };
    grad_check(eval, &params, 1e-5).unwrap()
}

const OP_TOL: f64 = 1e-5;

#[test]
fn linear_identity_and_scalar_cases() {
    let x = Tensor::from_vec(vec![1.0, 0.0]);
    let w = Tensor::identity(2);
    let b = Tensor::from_vec(vec![0.0, 0.0]);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.leaf(&x), g.leaf(&w), g.leaf(&b));
    let y = g.linear(xv, wv, Some(bv)).unwrap();
    assert_eq!(g.value(y), &[1.0, 0.0]);

    let x = Tensor::from_vec(vec![2.0]);
    let w = Tensor::new([1, 1], vec![3.0]).unwrap();
    let b = Tensor::from_vec(vec![1.0]);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.leaf(&x), g.leaf(&w), g.leaf(&b));
    let y = g.linear(xv, wv, Some(bv)).unwrap();
    assert_eq!(g.value(y), &[7.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let a = rand_t(&[4, 3], 1);
    let b = rand_t(&[3, 5], 2);
    let mut g = Graph::new();
    let (av, bv) = (g.leaf(&a), g.leaf(&b));
    let y = g.matmul(av, bv).unwrap();
    for i in 0..4 {
        for j in 0..5 {
            let mut s = 0.0;
            for k in 0..3 {
                s += a.data()[i * 3 + k] * b.data()[k * 5 + j];
            }
            assert!((g.value(y)[i * 5 + j] - s).abs() < 1e-12);
        }
    }
    // The same product through `linear` with W = bᵀ.
    let bt = Tensor::new([5, 3], kernels::transpose(b.data(), 3, 5)).unwrap();
    let wv = g.leaf(&bt);
    let y2 = g.linear(av, wv, None).unwrap();
    for (p, q) in g.value(y).iter().zip(g.value(y2)) {
        assert!((p - q).abs() < 1e-12);
    }
}

#[test]
fn linear_reports_both_shapes() {
    let x = Tensor::zeros([2, 3]);
    let w = Tensor::zeros([4, 5]);
    let mut g = Graph::new();
    let (xv, wv) = (g.leaf(&x), g.leaf(&w));
    match g.linear(xv, wv, None) {
        Err(DfrError::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 5]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn gelu_values() {
    let x = Tensor::from_vec(vec![0.0, 10.0, 1.0, -1.5]);
    let mut g = Graph::new();
    let xv = g.leaf(&x);
    let y = g.gelu(xv).unwrap();
    let v = g.value(y);
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 10.0).abs() < 1e-6);
    let phi = |z: f64| 0.5 * (1.0 + statrs::function::erf::erf(z / 2f64.sqrt()));
    assert!((v[2] - phi(1.0)).abs() < 1e-9);
    assert!((v[3] + 1.5 * phi(-1.5)).abs() < 1e-9);
}

#[test]
fn softmax_xent_cases() {
    // Correct class far ahead.
    let mut l = vec![0.0; 4];
    l[2] = 1e6;
    let logits = Tensor::new([1, 4], l).unwrap();
    let mut g = Graph::new();
    let lv = g.leaf(&logits);
    let loss = g.softmax_xent(lv, &[2], &[true]).unwrap();
    assert!(g.scalar(loss).abs() < 1e-12);

    let logits = Tensor::zeros([3, 8]);
    let mut g = Graph::new();
    let lv = g.leaf(&logits);
    let loss = g.softmax_xent(lv, &[0, 5, 7], &[true, true, false]).unwrap();
    assert!((g.scalar(loss) - 8f64.ln()).abs() < 1e-12);
}

#[test]
fn softmax_xent_matches_direct_formula() {
    let logits = rand_t(&[3, 5], 11);
    let targets = [4, 0, 2];
    let mask = [true, false, true];
    let mut g = Graph::new();
    let lv = g.leaf(&logits);
    let loss = g.softmax_xent(lv, &targets, &mask).unwrap();
    let mut oracle = 0.0;
    let mut m = 0.0;
    for r in 0..3 {
        if !mask[r] {
            continue;
        }
        let row = logits.row(r);
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        oracle += -(row[targets[r]].exp() / z).ln();
        m += 1.0;
    }
    assert!((g.scalar(loss) - oracle / m).abs() < 1e-10);
}

#[test]
fn softmax_xent_rejects_empty_mask() {
    let logits = Tensor::zeros([2, 3]);
    let mut g = Graph::new();
    let lv = g.leaf(&logits);
    assert!(matches!(g.softmax_xent(lv, &[0, 1], &[false, false]), Err(DfrError::EmptyMask)));
}

#[test]
fn softmax_xent_translation_invariant() {
    let logits = rand_t(&[4, 6], 5);
    let mut shifted = logits.clone();
    let mut r = rng(6);
    for i in 0..4 {
        let c: f64 = r.gen_range(-50.0..50.0);
        shifted.data_mut()[i * 6..(i + 1) * 6].iter_mut().for_each(|x| *x += c);
    }
    let targets = [1, 2, 3, 4];
    let mask = [true; 4];
    let mut g = Graph::new();
    let (a, b) = (g.leaf(&logits), g.leaf(&shifted));
    let la = g.softmax_xent(a, &targets, &mask).unwrap();
    let lb = g.softmax_xent(b, &targets, &mask).unwrap();
    assert!((g.scalar(la) - g.scalar(lb)).abs() < 1e-10);
}

#[test]
fn backward_square() {
    let x = Tensor::from_vec(vec![3.0]).with_grad();
    let mut g = Graph::new();
    let xv = g.leaf(&x);
    let sq = g.mul(xv, xv).unwrap();
    let grads = g.backward(sq).unwrap();
    assert_eq!(grads.get(xv), Some(&[6.0][..]));
}

#[test]
fn backward_rejects_non_scalar() {
    let x = Tensor::from_vec(vec![1.0, 2.0]).with_grad();
    let mut g = Graph::new();
    let xv = g.leaf(&x);
    assert!(matches!(g.backward(xv), Err(DfrError::NonScalarLoss(_))));
}

#[test]
fn frozen_leaves_get_no_gradient() {
    let mut w = rand_t(&[3, 4], 3);
    w.requires_grad = false;
    let x = rand_t(&[2, 4], 4);
    let mut g = Graph::new();
    let (xv, wv) = (g.leaf(&x), g.leaf(&w));
    let y = g.linear(xv, wv, None).unwrap();
    let y = g.gelu(y).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(wv).is_none());
    assert!(grads.get(xv).is_some());
    assert!(w.grad.is_none());
}

#[test]
fn sum_gelu_linear_vs_finite_differences() {
    let w = rand_t(&[3, 4], 20);
    let x = rand_t(&[4], 21);
    let err = check_op(vec![w, x], |g, v| {
        let y = g.linear(v[1], v[0], None)?;
        let y = g.gelu(y)?;
        g.sum(y)
    });
    assert!(err < OP_TOL, "{err}");
}

#[test]
fn linear_grad() {
    let err = check_op(vec![rand_t(&[3, 4], 1), rand_t(&[5, 4], 2), rand_t(&[5], 3)], |g, v| {
        g.linear(v[0], v[1], Some(v[2]))
    });
    assert!(err < OP_TOL, "{err}");
}

#[test]
fn matmul_and_transpose_grad() {
    let err = check_op(vec![rand_t(&[3, 4], 1), rand_t(&[3, 4], 2)], |g, v| {
        let bt = g.transpose(v[1])?;
        g.matmul(v[0], bt)
    });
    assert!(err < OP_TOL, "{err}");
}

#[test]
fn elementwise_grads() {
    let err = check_op(vec![rand_t(&[2, 3], 1), rand_t(&[2, 3], 2)], |g, v| {
        let a = g.add(v[0], v[1])?;
        let m = g.mul(a, v[1])?;
        g.scale(m, -0.7)
    });
    assert!(err < OP_TOL, "{err}");
}

#[test]
fn rms_norm_grad() {
    let err = check_op(vec![rand_t(&[3, 6], 1), rand_t(&[6], 2)], |g, v| g.rms_norm(v[0], v[1], 1e-6));
    assert!(err < OP_TOL, "{err}");
}

#[test]
fn rope_grad() {
    let err = check_op(vec![rand_t(&[4, 8], 1)], |g, v| g.rope(v[0], &[0, 3, 4, 9], 2, 10000.0));
    assert!(err < OP_TOL, "{err}");
}

#[test]
fn attention_grad() {
    let err = check_op(vec![rand_t(&[5, 8], 1), rand_t(&[5, 8], 2), rand_t(&[5, 8], 3)], |g, v| {
        g.causal_attention(v[0], v[1], v[2], 2)
    });
    assert!(err < OP_TOL, "{err}");
}

#[test]
fn gather_concat_reshape_mean_grad() {
    let err = check_op(vec![rand_t(&[5, 3], 1), rand_t(&[2, 3], 2)], |g, v| {
        let a = g.gather_rows(v[0], &[4, 0, 4])?;
        let c = g.concat_rows(&[a, v[1]])?;
        let r = g.reshape(c, &[3, 5])?;
        g.mean_rows(r)
    });
    assert!(err < OP_TOL, "{err}");
}

#[test]
fn xent_grad() {
    let err = check_op(vec![rand_t(&[4, 7], 1)], |g, v| {
        g.softmax_xent(v[0], &[1, 6, 0, 3], &[true, false, true, true])
    });
    assert!(err < OP_TOL, "{err}");
}

#[test]
fn masked_log_softmax_grad() {
    let allowed: Vec<bool> = (0..16).map(|i| i % 5 != 0).collect();
    let err = check_op(vec![rand_t(&[4, 4], 1)], move |g, v| g.masked_log_softmax(v[0], &allowed));
    assert!(err < OP_TOL, "{err}");
}

#[test]
fn non_finite_is_an_error() {
    let x = Tensor::from_vec(vec![1e300]);
    let mut g = Graph::new();
    let xv = g.leaf(&x);
    assert!(matches!(g.mul(xv, xv), Err(DfrError::NonFinite { .. })));
}

#[test]
fn ops_are_deterministic() {
    let run = || {
        let q = rand_t(&[6, 8], 1);
        let k = rand_t(&[6, 8], 2);
        let v = rand_t(&[6, 8], 3);
        let mut g = Graph::new();
        let (a, b, c) = (g.leaf(&q), g.leaf(&k), g.leaf(&v));
        let o = g.causal_attention(a, b, c, 4).unwrap();
        let s = g.sum(o).unwrap();
        let gr = g.backward(s).unwrap();
        (g.value(o).to_vec(), gr.get(a).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}

#[test]
fn gather_rejects_out_of_range() {
    let t = Tensor::zeros([3, 2]);
    let mut g = Graph::new();
    let tv = g.leaf(&t);
    assert!(g.gather_rows(tv, &[0, 3]).is_err());
    let empty = g.gather_rows(tv, &[]).unwrap();
    assert_eq!(g.shape(empty), &[0, 2]);
}
