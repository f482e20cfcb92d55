//! Location solvers for the weighted estimating equation.
//!
//! Per family:
//! - mean: closed-form weighted average;
//! - spatial median: damped Weiszfeld iteration with a step-halving
//!   safeguard and the zero-score convention at data points;
//! - Huber and Lp-median: Newton iteration on the weighted score with
//!   backtracking on the objective, falling back to a gradient step when
//!   the score derivative is near-singular.

use nalgebra::DVector;

use crate::error::Result;
use crate::model::{
    objective, score, ClusteredSample, EstimatorFamily, Point, WeightScheme, TIE_TOLERANCE,
};

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    /// Stop when the weighted score norm drops below this.
    pub gradient_tol: f64,
    /// Stop when the iterate moves less than this.
    pub step_tol: f64,
    pub max_iterations: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            gradient_tol: 1e-10,
            step_tol: 1e-12,
            max_iterations: 500,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub theta_hat: Point,
    pub iterations: usize,
    pub converged: bool,
    pub final_gradient_norm: f64,
    pub objective_value: f64,
}

/// Minimizes the weighted empirical objective for `family`.
///
/// Weights are rescaled to average one before solving; the minimizer is
/// unchanged, and reported gradient norms and objective values refer to
/// the rescaled weights. Non-convergence is reported through the result,
/// not as an error; a degenerate sample (all points equal) returns that
/// point immediately.
pub fn solve(
    sample: &ClusteredSample,
    weights: &WeightScheme,
    family: &EstimatorFamily,
    opts: &SolveOptions,
) -> Result<SolveResult> {
    let weights = &weights.normalized(sample)?;
    let expanded = weights.expanded(sample)?;

    if let Some(point) = degenerate_point(sample) {
        let objective_value = objective(sample, weights, family, &point)?;
        return Ok(SolveResult {
            theta_hat: point,
            iterations: 0,
            converged: true,
            final_gradient_norm: 0.0,
            objective_value,
        });
    }

    match family {
        EstimatorFamily::Mean => solve_mean(sample, weights, &expanded),
        EstimatorFamily::SpatialMedian => solve_weiszfeld(sample, weights, &expanded, opts),
        EstimatorFamily::Huber { .. } | EstimatorFamily::LpMedian { .. } => {
            solve_newton(sample, weights, family, opts)
        }
    }
}

fn degenerate_point(sample: &ClusteredSample) -> Option<Point> {
    let mut points = sample.iter_points();
    let first = points.next()?;
    if points.all(|p| (p - first).norm() < TIE_TOLERANCE) {
        Some(first.clone())
    } else {
        None
    }
}

fn solve_mean(
    sample: &ClusteredSample,
    weights: &WeightScheme,
    expanded: &[Vec<f64>],
) -> Result<SolveResult> {
    let mut num = DVector::zeros(sample.dim());
    let mut den = 0.0;
    for (cluster, wi) in sample.clusters().iter().zip(expanded) {
        for (x, &wij) in cluster.iter().zip(wi) {
            num += x * wij;
            den += wij;
        }
    }
    let theta_hat = num / den;
    let fam = EstimatorFamily::Mean;
    Ok(SolveResult {
        final_gradient_norm: score(sample, weights, &fam, &theta_hat)?.norm(),
        objective_value: objective(sample, weights, &fam, &theta_hat)?,
        theta_hat,
        iterations: 1,
        converged: true,
    })
}

/// Coordinatewise weighted median, the robust starting point.
fn weighted_median_init(sample: &ClusteredSample, expanded: &[Vec<f64>]) -> Point {
    let d = sample.dim();
    let mut init = DVector::zeros(d);
    for coord in 0..d {
        let mut pairs: Vec<(f64, f64)> = sample
            .clusters()
            .iter()
            .zip(expanded)
            .flat_map(|(cluster, wi)| {
                cluster.iter().zip(wi).map(move |(x, &w)| (x[coord], w))
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let half: f64 = pairs.iter().map(|(_, w)| w).sum::<f64>() / 2.0;
        let mut acc = 0.0;
        let mut value = pairs[pairs.len() - 1].0;
        for &(x, w) in &pairs {
            acc += w;
            if acc >= half {
                value = x;
                break;
            }
        }
        init[coord] = value;
    }
    init
}

fn weighted_mean_init(sample: &ClusteredSample, expanded: &[Vec<f64>]) -> Point {
    let mut num = DVector::zeros(sample.dim());
    let mut den = 0.0;
    for (cluster, wi) in sample.clusters().iter().zip(expanded) {
        for (x, &wij) in cluster.iter().zip(wi) {
            num += x * wij;
            den += wij;
        }
    }
    num / den
}

/// Norm of the minimal subgradient of the weighted spatial-median
/// objective at `a`: observations tied with `a` contribute a ball of
/// radius w/N to the subdifferential.
fn spatial_median_grad_norm(
    sample: &ClusteredSample,
    expanded: &[Vec<f64>],
    a: &Point,
) -> f64 {
    let n_total = sample.n_total() as f64;
    let mut grad = DVector::zeros(sample.dim());
    let mut tie_weight = 0.0;
    for (cluster, wi) in sample.clusters().iter().zip(expanded) {
        for (x, &wij) in cluster.iter().zip(wi) {
            let diff = a - x;
            let r = diff.norm();
            if r < TIE_TOLERANCE {
                tie_weight += wij;
            } else {
                grad += diff * (wij / r);
            }
        }
    }
    (grad.norm() - tie_weight).max(0.0) / n_total
}

fn solve_weiszfeld(
    sample: &ClusteredSample,
    weights: &WeightScheme,
    expanded: &[Vec<f64>],
    opts: &SolveOptions,
) -> Result<SolveResult> {
    let fam = EstimatorFamily::SpatialMedian;
    let mut a = weighted_median_init(sample, expanded);
    let mut obj = objective(sample, weights, &fam, &a)?;
    let mut iterations = 0;
    let mut grad_norm = spatial_median_grad_norm(sample, expanded, &a);

    while iterations < opts.max_iterations {
        if grad_norm <= opts.gradient_tol {
            break;
        }
        iterations += 1;

        // Weiszfeld target: weighted average with 1/r weights, skipping
        // observations tied with the current iterate.
        let mut num = DVector::zeros(sample.dim());
        let mut den = 0.0;
        for (cluster, wi) in sample.clusters().iter().zip(expanded) {
            for (x, &wij) in cluster.iter().zip(wi) {
                let r = (&a - x).norm();
                if r >= TIE_TOLERANCE {
                    num += x * (wij / r);
                    den += wij / r;
                }
            }
        }
        if den == 0.0 {
            break;
        }
        let target = num / den;

        // Step halving toward the Weiszfeld target until the objective
        // does not increase; the margin covers rounding noise of the
        // objective sum near the optimum.
        let margin = 1e-12 * obj.abs().max(1.0);
        let mut step = &target - &a;
        let mut accepted = false;
        for _ in 0..60 {
            let candidate = &a + &step;
            let cand_obj = objective(sample, weights, &fam, &candidate)?;
            if cand_obj <= obj + margin {
                if step.norm() < opts.step_tol {
                    a = candidate;
                    obj = cand_obj;
                    accepted = false;
                    break;
                }
                a = candidate;
                obj = cand_obj;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        grad_norm = spatial_median_grad_norm(sample, expanded, &a);
        if !accepted {
            break;
        }
    }

    Ok(SolveResult {
        converged: grad_norm <= opts.gradient_tol,
        theta_hat: a,
        iterations,
        final_gradient_norm: grad_norm,
        objective_value: obj,
    })
}

fn solve_newton(
    sample: &ClusteredSample,
    weights: &WeightScheme,
    family: &EstimatorFamily,
    opts: &SolveOptions,
) -> Result<SolveResult> {
    let expanded = weights.expanded(sample)?;
    let mut a = match family {
        EstimatorFamily::Huber { .. } => weighted_median_init(sample, &expanded),
        _ => weighted_mean_init(sample, &expanded),
    };
    let d = sample.dim();
    let n_total = sample.n_total() as f64;
    let mut obj = objective(sample, weights, family, &a)?;
    let mut iterations = 0;
    let mut grad = score(sample, weights, family, &a)?;

    while iterations < opts.max_iterations {
        if grad.norm() <= opts.gradient_tol {
            break;
        }
        iterations += 1;

        let mut jac = nalgebra::DMatrix::zeros(d, d);
        for (cluster, wi) in sample.clusters().iter().zip(&expanded) {
            for (x, &wij) in cluster.iter().zip(wi) {
                jac += family.psi_jacobian(x, &a)? * wij;
            }
        }
        jac /= n_total;

        let svd = jac.clone().svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };

        let direction = if condition < 1e12 {
            match jac.lu().solve(&(-&grad)) {
                Some(step) => step,
                None => -&grad,
            }
        } else {
            // Near-singular curvature: plain descent on the score.
            -&grad
        };

        // Backtracking on the objective.
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let candidate = &a + &direction * t;
            let cand_obj = objective(sample, weights, family, &candidate)?;
            if cand_obj <= obj + 1e-15 {
                let step_norm = (direction.norm()) * t;
                a = candidate;
                obj = cand_obj;
                moved = step_norm >= opts.step_tol;
                break;
            }
            t *= 0.5;
        }
        grad = score(sample, weights, family, &a)?;
        if !moved {
            break;
        }
    }

    Ok(SolveResult {
        converged: grad.norm() <= opts.gradient_tol,
        final_gradient_norm: grad.norm(),
        theta_hat: a,
        iterations,
        objective_value: obj,
    })
}
