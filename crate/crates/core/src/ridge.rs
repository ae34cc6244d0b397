//! Ridge regression on dense rows, used for embedding probes.

use nalgebra::{DMatrix, DVector};

use crate::error::{DfrError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RidgeModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl RidgeModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }
}

/// Fits one ridge model per target column with a shared factorization of
/// the centered Gram matrix. The intercept is not penalized.
pub fn fit_ridge_multi(rows: &[Vec<f64>], targets: &[Vec<f64>], lambda: f64) -> Result<Vec<RidgeModel>> {
    let n = rows.len();
    if n == 0 {
        return Err(DfrError::invalid("ridge: no rows"));
    }
    let p = rows[0].len();
    if rows.iter().any(|r| r.len() != p) || targets.iter().any(|t| t.len() != n) {
        return Err(DfrError::invalid("ridge: ragged design"));
    }
    let mean: Vec<f64> = (0..p).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, p, |i, j| rows[i][j] - mean[j]);
    let mut gram = x.transpose() * &x;
    for j in 0..p {
        gram[(j, j)] += lambda;
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| DfrError::Numeric("ridge: Gram matrix not positive definite".into()))?;
    let mut out = Vec::with_capacity(targets.len());
    for y in targets {
        let ym = y.iter().sum::<f64>() / n as f64;
        let yc = DVector::from_iterator(n, y.iter().map(|v| v - ym));
        let w = chol.solve(&(x.transpose() * yc));
        let weights: Vec<f64> = w.iter().copied().collect();
        let intercept = ym - weights.iter().zip(&mean).map(|(a, b)| a * b).sum::<f64>();
        out.push(RidgeModel { weights, intercept });
    }
    Ok(out)
}

pub fn fit_ridge(rows: &[Vec<f64>], y: &[f64], lambda: f64) -> Result<RidgeModel> {
    Ok(fit_ridge_multi(rows, &[y.to_vec()], lambda)?.remove(0))
}

/// Coefficient of determination `1 − SS_res / SS_tot`.
pub fn r_squared(pred: &[f64], y: &[f64]) -> f64 {
    let m = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - m).powi(2)).sum();
    let ss_res: f64 = pred.iter().zip(y).map(|(p, v)| (p - v).powi(2)).sum();
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { f64::NEG_INFINITY };
    }
    1.0 - ss_res / ss_tot
}
