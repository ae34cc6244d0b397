//! Raw slice kernels behind the graph ops.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// `c = beta * c + a · b` for an `m × k` matrix `a` and `k × n` matrix `b`
/// given by row/column strides; `c` is row-major with row stride `rsc`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    rsc: usize,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() > (m - 1) * rsc + (n - 1), "gemm: output too short");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * rsc + j] *= beta;
            }
        }
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa, "gemm: lhs too short");
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb, "gemm: rhs too short");
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Returns `(logsumexp(row), softmax(row))`.
pub fn log_softmax_parts(row: &[f64]) -> (f64, Vec<f64>) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);
    (m + z.ln(), p)
}

/// Rotates interleaved pairs of every head; `inverse` applies the transpose.
pub fn rotate_pairs(
    x: &[f64],
    t: usize,
    n_heads: usize,
    hd: usize,
    cos: &[f64],
    sin: &[f64],
    inverse: bool,
) -> Vec<f64> {
    let d = n_heads * hd;
    let half = hd / 2;
    let mut out = vec![0.0; x.len()];
    for r in 0..t {
        for h in 0..n_heads {
            let base = r * d + h * hd;
            for i in 0..half {
                let c = cos[r * half + i];
                let s = if inverse { -sin[r * half + i] } else { sin[r * half + i] };
                let a = x[base + 2 * i];
                let b = x[base + 2 * i + 1];
                out[base + 2 * i] = a * c - b * s;
                out[base + 2 * i + 1] = a * s + b * c;
            }
        }
    }
    out
}

/// Causal multi-head attention; returns the output and per-head
/// probabilities laid out as `[head][query][key]`.
pub fn attention_forward(q: &[f64], k: &[f64], v: &[f64], t: usize, d: usize, n_heads: usize) -> (Vec<f64>, Vec<f64>) {
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![0.0; t * d];
    let mut probs = vec![0.0; n_heads * t * t];
    if t == 0 {
        return (out, probs);
    }
    for h in 0..n_heads {
        let off = h * hd;
        let p = &mut probs[h * t * t..(h + 1) * t * t];
        gemm(t, hd, t, &q[off..], d, 1, &k[off..], 1, d, p, t, 0.0);
        for i in 0..t {
            let row = &mut p[i * t..(i + 1) * t];
            let mut m = f64::NEG_INFINITY;
            for x in row[..=i].iter_mut() {
                *x *= scale;
                m = m.max(*x);
            }
            let mut z = 0.0;
            for x in row[..=i].iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            for x in row[..=i].iter_mut() {
                *x /= z;
            }
            row[i + 1..].iter_mut().for_each(|x| *x = 0.0);
        }
        gemm(t, t, hd, p, t, 1, &v[off..], d, 1, &mut out[off..], d, 0.0);
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    g: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    t: usize,
    d: usize,
    n_heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = vec![0.0; t * d];
    let mut dk = vec![0.0; t * d];
    let mut dv = vec![0.0; t * d];
    if t == 0 {
        return (dq, dk, dv);
    }
    let mut ds = vec![0.0; t * t];
    for h in 0..n_heads {
        let off = h * hd;
        let p = &probs[h * t * t..(h + 1) * t * t];
        gemm(t, hd, t, &g[off..], d, 1, &v[off..], 1, d, &mut ds, t, 0.0);
        gemm(t, t, hd, p, 1, t, &g[off..], d, 1, &mut dv[off..], d, 1.0);
        for i in 0..t {
            let pr = &p[i * t..(i + 1) * t];
            let dr = &mut ds[i * t..(i + 1) * t];
            let dot: f64 = (0..=i).map(|j| pr[j] * dr[j]).sum();
            for j in 0..t {
                dr[j] = if j <= i { pr[j] * (dr[j] - dot) * scale } else { 0.0 };
            }
        }
        gemm(t, t, hd, &ds, t, 1, &k[off..], d, 1, &mut dq[off..], d, 1.0);
        gemm(t, t, hd, &ds, 1, t, &q[off..], d, 1, &mut dk[off..], d, 1.0);
    }
    (dq, dk, dv)
}
