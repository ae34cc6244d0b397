use super::tensor::Tensor;
use crate::error::{DfrError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update of every tensor in `params`.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&[f64]],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(DfrError::invalid(format!(
            "adam: {} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() {
        return Err(DfrError::invalid("adam: state does not match parameter list"));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != g.len() || state.m[i].len() != g.len() {
            return Err(DfrError::Shape {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: vec![g.len()],
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *x -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Convenience wrapper applying an [`AdamConfig`] with a scheduled rate.
pub fn adam_update(
    params: &mut [&mut Tensor],
    grads: &[&[f64]],
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<()> {
    adam_step(params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
}

/// Linear warmup over `warmup` steps, then cosine decay to zero at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if warmup > 0 && step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    if total <= warmup {
        return base;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`
/// (no-op when `max_norm <= 0`). Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0, 3.5]);
        let before = p.clone();
        let mut st = AdamState::new();
        adam_step(&mut [&mut p], &[&[0.0, 0.0, 0.0]], &mut st, 1e-2, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(p.data(), before.data());
    }

    #[test]
    fn constant_gradient_descends() {
        let mut p = Tensor::from_vec(vec![0.0, 0.0]);
        let mut st = AdamState::new();
        for _ in 0..100 {
            adam_step(&mut [&mut p], &[&[0.5, -3.0]], &mut st, 1e-2, 0.9, 0.999, 1e-8).unwrap();
        }
        assert!(p.data()[0] < 0.0);
        assert!(p.data()[1] > 0.0);
    }

    #[test]
    fn matches_hand_unrolled_trace() {
        // 1-D, grads 1.0, -2.0, 0.5 at lr 0.1.
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.1f64);
        let mut p = Tensor::from_vec(vec![1.0]);
        let mut st = AdamState::new();
        for g in [1.0, -2.0, 0.5] {
            adam_step(&mut [&mut p], &[&[g]], &mut st, lr, b1, b2, eps).unwrap();
        }
        // Step 1: m=0.1, v=0.001, mhat=1, vhat=1.
        let x1 = 1.0 - lr * 1.0 / (1.0 + eps);
        // Step 2: m=0.09-0.2=-0.11, v=0.000999+0.004=0.004999.
        let m2: f64 = 0.9 * 0.1 + 0.1 * -2.0;
        let v2: f64 = 0.999 * 0.001 + 0.001 * 4.0;
        let x2 = x1 - lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
        let m3 = 0.9 * m2 + 0.1 * 0.5;
        let v3 = 0.999 * v2 + 0.001 * 0.25;
        let x3 = x2 - lr * (m3 / (1.0 - b1.powi(3))) / ((v3 / (1.0 - b2.powi(3))).sqrt() + eps);
        assert!((p.data()[0] - x3).abs() < 1e-12, "{} vs {}", p.data()[0], x3);
    }

    #[test]
    fn rejects_mismatched_lists() {
        let mut p = Tensor::from_vec(vec![0.0]);
        let mut st = AdamState::new();
        assert!(adam_step(&mut [&mut p], &[], &mut st, 1e-3, 0.9, 0.999, 1e-8).is_err());
    }

    #[test]
    fn schedule_shape() {
        assert!((cosine_lr(1.0, 0, 100, 10) - 0.1).abs() < 1e-12);
        assert!((cosine_lr(1.0, 10, 110, 10) - 1.0).abs() < 1e-12);
        assert!(cosine_lr(1.0, 110, 110, 10).abs() < 1e-12);
        assert_eq!(cosine_lr(0.5, 3, 0, 0), 0.5);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-12 && (g[1][0] - 0.8).abs() < 1e-12);
        let mut h = vec![vec![0.1]];
        clip_grad_norm(&mut h, 1.0);
        assert_eq!(h[0][0], 0.1);
    }
}
