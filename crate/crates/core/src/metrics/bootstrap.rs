use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::stats::{percentile, sorted_copy};

pub const DEFAULT_REPLICATES: usize = 1000;

/// Resamples drawn per replicate before giving up on degenerate data.
pub const MAX_REDRAWS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub point: f64,
    pub mean: f64,
    /// Sample standard deviation of the replicates.
    pub std: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_replicates: usize,
}

/// Percentile bootstrap over sample indices `0..n`. `metric` receives the
/// resampled indices; resamples on which it fails are redrawn.
///
/// Replicate `r` draws from its own ChaCha stream `r` under `seed`, so the
/// result does not depend on thread scheduling.
pub fn bootstrap_ci<F>(n: usize, metric: F, n_replicates: usize, seed: u64) -> Result<BootstrapResult>
where
    F: Fn(&[usize]) -> Result<f64> + Sync,
{
    ensure!(n > 0, Validation, "bootstrap needs at least one sample");
    ensure!(n_replicates > 0, Validation, "bootstrap needs at least one replicate");
    let all: Vec<usize> = (0..n).collect();
    let point = metric(&all)?;
    let values = (0..n_replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let mut idx = vec![0; n];
            for _ in 0..MAX_REDRAWS {
                idx.iter_mut().for_each(|i| *i = rng.random_range(0..n));
                if let Ok(v) = metric(&idx) {
                    return Ok(v);
                }
            }
            Err(Error::Validation(format!(
                "bootstrap replicate {r} failed {MAX_REDRAWS} redraws: data too degenerate"
            )))
        })
        .collect::<Result<Vec<f64>>>()?;
    let sorted = sorted_copy(&values);
    // Shifted by the first replicate so constant metrics stay exact.
    let shifted: Vec<f64> = values.iter().map(|v| v - values[0]).collect();
    let shift_mean = shifted.iter().sum::<f64>() / n_replicates as f64;
    let mean = values[0] + shift_mean;
    let std = if n_replicates > 1 {
        (shifted.iter().map(|d| (d - shift_mean).powi(2)).sum::<f64>() / (n_replicates - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(BootstrapResult {
        point,
        mean,
        std,
        ci_low: percentile(&sorted, 0.025),
        ci_high: percentile(&sorted, 0.975),
        n_replicates,
    })
}
