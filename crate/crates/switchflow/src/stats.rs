//! Deterministic reductions and small statistical helpers.
//!
//! Estimator means use compensated (Neumaier) summation over a slice indexed
//! by path, so the result does not depend on how the per-path values were
//! produced (serial or parallel, any worker count).

/// Compensated sum of a slice in index order.
pub fn neumaier_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Sample mean and standard error of the mean.
///
/// Returns `(mean, stderr)`; `stderr` is 0 for fewer than two samples.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = neumaier_sum(values) / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = neumaier_sum(&sq) / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

/// Unbiased sample variance.
pub fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = neumaier_sum(values) / n as f64;
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    neumaier_sum(&sq) / (n as f64 - 1.0)
}

/// Two-sample chi-square homogeneity test over categorical counts.
///
/// Returns `(statistic, degrees_of_freedom)`. Categories empty in both
/// samples are skipped.
pub fn chi_square_two_sample(counts_a: &[u64], counts_b: &[u64]) -> (f64, usize) {
    assert_eq!(counts_a.len(), counts_b.len());
    let total_a: u64 = counts_a.iter().sum();
    let total_b: u64 = counts_b.iter().sum();
    let grand = (total_a + total_b) as f64;
    let mut stat = 0.0;
    let mut used = 0usize;
    for (&a, &b) in counts_a.iter().zip(counts_b) {
        let col = (a + b) as f64;
        if col == 0.0 {
            continue;
        }
        used += 1;
        let ea = total_a as f64 * col / grand;
        let eb = total_b as f64 * col / grand;
        stat += (a as f64 - ea).powi(2) / ea + (b as f64 - eb).powi(2) / eb;
    }
    (stat, used.saturating_sub(1))
}

/// Critical value of the chi-square distribution at upper-tail level `alpha`.
pub fn chi_square_critical(dof: usize, alpha: f64) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    ChiSquared::new(dof as f64)
        .expect("positive dof")
        .inverse_cdf(1.0 - alpha)
}

/// Standard error of a binomial proportion estimated from `n` trials.
pub fn binomial_stderr(p_hat: f64, n: usize) -> f64 {
    (p_hat * (1.0 - p_hat) / n as f64).sqrt()
}
