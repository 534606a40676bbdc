//! Small descriptive statistics shared by the fingerprint and the bootstrap.

/// Percentile by linear interpolation between order statistics
/// (position `q * (n - 1)` in the sorted sample). `q` is in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty sample");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population variance (divides by n), computed on data shifted by the
/// first element so constant inputs give exactly zero.
pub fn population_variance(xs: &[f64]) -> f64 {
    let Some(&x0) = xs.first() else { return 0.0 };
    let d: Vec<f64> = xs.iter().map(|x| x - x0).collect();
    let m = mean(&d);
    (d.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / xs.len() as f64).max(0.0)
}

pub fn sorted_copy(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v
}
