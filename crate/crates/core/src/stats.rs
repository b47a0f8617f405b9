//! Small descriptive-statistics helpers shared across modules.
//!
//! All sums run in ascending index order so results are reproducible
//! bit-for-bit regardless of how callers schedule work.

/// Scale factor that makes the MAD a consistent estimator of the standard
/// deviation under Gaussian noise (`1 / Φ⁻¹(0.75)`).
pub const MAD_CONSISTENCY: f64 = 1.4826;

pub fn mean(values: &[f64]) -> f64 {
    debug_assert!(!values.is_empty());
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (divisor `n - 1`). Requires `n >= 2`.
pub fn sample_std(values: &[f64]) -> f64 {
    debug_assert!(values.len() >= 2);
    let mu = mean(values);
    let ss: f64 = values.iter().map(|v| (v - mu) * (v - mu)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// Unbiased sample variance (divisor `n - 1`). Requires `n >= 2`.
pub fn sample_variance(values: &[f64]) -> f64 {
    let sd = sample_std(values);
    sd * sd
}

/// Median; an even-length set yields the mean of the two central order
/// statistics. Returns `None` on an empty slice.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    Some(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    })
}

/// Median absolute deviation about the median (unscaled).
pub fn mad(values: &[f64]) -> Option<f64> {
    let center = median(values)?;
    let deviations: Vec<f64> = values.iter().map(|v| (v - center).abs()).collect();
    median(&deviations)
}

/// Euclidean norm.
pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
