//! Finite-sample replacement breakdown point of weighted M-estimators.
//!
//! With observation weights summing to N, the estimator breaks down once
//! the adversary can replace a set of observations whose weights sum to
//! at least eps_star * N; sorting makes the largest-weight observations
//! the optimal replacement targets, so only prefix sums matter.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BreakdownReport {
    /// Minimal number of replaced observations that causes breakdown.
    pub k_star: usize,
    /// k_star / N.
    pub epsilon_star: f64,
    /// [k1_star, k0_star] bracket from the lower/upper thresholds.
    pub bracket: (usize, usize),
    /// The threshold eps_star * N that the prefix sum must reach.
    pub threshold_used: f64,
    /// Sum of the k_star largest weights.
    pub prefix_sum_at_k: f64,
}

/// Boundary ties within this tolerance of the threshold count as reached.
const THRESHOLD_TIE_TOL: f64 = 1e-9;

fn check_weights(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::EmptySample);
    }
    for (index, &value) in weights.iter().enumerate() {
        if !(value > 0.0) || !value.is_finite() {
            return Err(Error::NonPositiveWeight { index, value });
        }
    }
    let total: f64 = weights.iter().sum();
    let n = weights.len() as f64;
    if (total - n).abs() > 1e-9 * n.max(1.0) {
        return Err(Error::WeightSumMismatch {
            expected: weights.len() as f64,
            got: total,
        });
    }
    Ok(())
}

/// Smallest k such that the k largest weights sum to at least
/// `threshold` (weak inequality with a small tie tolerance).
fn min_count_reaching(sorted_desc: &[f64], threshold: f64) -> usize {
    let mut acc = 0.0;
    for (idx, w) in sorted_desc.iter().enumerate() {
        acc += w;
        if acc >= threshold - THRESHOLD_TIE_TOL {
            return idx + 1;
        }
    }
    sorted_desc.len()
}

/// Exact weighted breakdown count for per-observation weights summing
/// to N and a breakdown fraction `eps_star` of the unweighted estimator.
pub fn breakdown_exact(weights: &[f64], eps_star: f64) -> Result<BreakdownReport> {
    if !(eps_star > 0.0 && eps_star <= 1.0) {
        return Err(Error::OutOfRange {
            what: format!("eps_star must lie in (0, 1], got {eps_star}"),
        });
    }
    check_weights(weights)?;
    let n = weights.len();
    let mut sorted: Vec<f64> = weights.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let threshold = eps_star * n as f64;
    let k_star = min_count_reaching(&sorted, threshold);
    let prefix_sum_at_k: f64 = sorted.iter().take(k_star).sum();
    Ok(BreakdownReport {
        k_star,
        epsilon_star: k_star as f64 / n as f64,
        bracket: (k_star, k_star),
        threshold_used: threshold,
        prefix_sum_at_k,
    })
}

/// Theorem-style bracket: counts from a lower and an upper breakdown
/// fraction; the true weighted breakdown count lies between them.
pub fn breakdown_bracket(
    weights: &[f64],
    eps_lower: f64,
    eps_upper: f64,
) -> Result<(usize, usize)> {
    if !(eps_lower > 0.0 && eps_lower <= eps_upper && eps_upper <= 1.0) {
        return Err(Error::OutOfRange {
            what: format!("need 0 < eps_lower <= eps_upper <= 1, got ({eps_lower}, {eps_upper})"),
        });
    }
    check_weights(weights)?;
    let n = weights.len() as f64;
    let mut sorted: Vec<f64> = weights.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    // The lower fraction is reached with at most as many replacements,
    // so it yields the upper end of the count bracket and vice versa.
    let k1 = min_count_reaching(&sorted, eps_lower * n);
    let k0 = min_count_reaching(&sorted, eps_upper * n);
    debug_assert!(k1 <= k0);
    Ok((k1, k0))
}

/// Finite-sample breakdown fraction of the unweighted spatial median:
/// floor((N - 1) / 2) / N.
pub fn spatial_median_eps(n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::EmptySample);
    }
    Ok(((n - 1) / 2) as f64 / n as f64)
}

/// Expands per-cluster weights to one weight per observation.
pub fn expand_per_observation(cluster_weights: &[f64], sizes: &[usize]) -> Vec<f64> {
    cluster_weights
        .iter()
        .zip(sizes)
        .flat_map(|(&w, &m)| std::iter::repeat(w).take(m))
        .collect()
}
