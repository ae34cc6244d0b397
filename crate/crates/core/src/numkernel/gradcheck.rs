use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::Result;

/// Coordinates sampled per tensor by [`grad_check`].
pub const MAX_CHECKED_COORDS: usize = 64;

/// Compares analytic gradients against central differences.
///
/// `f` returns the loss and one analytic gradient per parameter. The result
/// is the maximum over sampled coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<(f64, Vec<Vec<f64>>)>,
{
    grad_check_sampled(f, params, eps, MAX_CHECKED_COORDS, 0)
}

pub fn grad_check_sampled<F>(f: F, params: &[Tensor], eps: f64, max_coords: usize, seed: u64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<(f64, Vec<Vec<f64>>)>,
{
    let (_, analytic) = f(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, max_coords).into_vec();
            c.sort_unstable();
            c
        };
        for j in coords {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let (up, _) = f(&work)?;
            work[pi].data_mut()[j] = orig - eps;
            let (down, _) = f(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
