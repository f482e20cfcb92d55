//! Per-cluster weight optimization minimizing the determinant of the
//! sandwich covariance, plus the closed-form solution for the
//! equicorrelated case.
//!
//! The determinant objective is invariant under a common rescaling of the
//! weights (the meat scales quadratically, the bread linearly, and the
//! sandwich cancels the scale), so the search runs unconstrained in
//! log-weights and the result is normalized to sum m_i w_i = N_n at the
//! end. Clusters of identical size share a flat direction of the
//! objective; their weights are averaged for a deterministic output.

use nalgebra::DMatrix;

use crate::asymptotics::MAX_BREAD_CONDITION;
use crate::error::{Error, Result};
use crate::model::{ClusteredSample, EstimatorFamily, Matrix, Point, WeightScheme};

/// Per-cluster score moments: everything the determinant objective needs,
/// with the weights factored out.
#[derive(Debug, Clone)]
pub struct ClusterMoments {
    /// Per cluster: sum_j psi psi^T.
    pub same: Vec<Matrix>,
    /// Per cluster: sum over ordered cross pairs j' != j of psi psi^T.
    pub cross: Vec<Matrix>,
    /// Per cluster: sum_j dpsi/da.
    pub deriv: Vec<Matrix>,
    pub sizes: Vec<usize>,
    pub dim: usize,
}

impl ClusterMoments {
    pub fn from_sample(
        sample: &ClusteredSample,
        family: &EstimatorFamily,
        a: &Point,
    ) -> Result<Self> {
        let d = sample.dim();
        let mut same = Vec::with_capacity(sample.n_clusters());
        let mut cross = Vec::with_capacity(sample.n_clusters());
        let mut deriv = Vec::with_capacity(sample.n_clusters());
        for cluster in sample.clusters() {
            let scores: Vec<Point> = cluster
                .iter()
                .map(|x| family.psi(x, a))
                .collect::<Result<_>>()?;
            let mut s = DMatrix::zeros(d, d);
            let mut total = nalgebra::DVector::zeros(d);
            for psi in &scores {
                s += psi * psi.transpose();
                total += psi;
            }
            let c = &total * total.transpose() - &s;
            let mut v = DMatrix::zeros(d, d);
            for x in cluster {
                v += family.psi_jacobian(x, a)?;
            }
            same.push(s);
            cross.push(c);
            deriv.push(v);
        }
        Ok(Self {
            same,
            cross,
            deriv,
            sizes: sample.sizes(),
            dim: d,
        })
    }

    /// Entrywise average of several moment sets with identical shapes;
    /// used to stabilize the objective across simulation replications.
    pub fn average(sets: &[ClusterMoments]) -> Result<Self> {
        let first = sets.first().ok_or(Error::EmptySample)?;
        let n = first.sizes.len();
        let d = first.dim;
        let r = sets.len() as f64;
        let mut out = ClusterMoments {
            same: vec![DMatrix::zeros(d, d); n],
            cross: vec![DMatrix::zeros(d, d); n],
            deriv: vec![DMatrix::zeros(d, d); n],
            sizes: first.sizes.clone(),
            dim: d,
        };
        for set in sets {
            for i in 0..n {
                out.same[i] += &set.same[i] / r;
                out.cross[i] += &set.cross[i] / r;
                out.deriv[i] += &set.deriv[i] / r;
            }
        }
        Ok(out)
    }

    /// Exact moments of the equicorrelated location model: unit score
    /// covariance per observation, cross-pair covariance tau, identity
    /// score derivative. The mean family over an equicorrelated sample
    /// has exactly this structure in expectation.
    pub fn analytic_equicorrelated(sizes: &[usize], tau: f64, d: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&tau) {
            return Err(Error::OutOfRange {
                what: format!("tau must lie in [0, 1), got {tau}"),
            });
        }
        let identity = Matrix::identity(d, d);
        Ok(Self {
            same: sizes.iter().map(|&m| &identity * m as f64).collect(),
            cross: sizes
                .iter()
                .map(|&m| &identity * (m * (m - 1)) as f64 * tau)
                .collect(),
            deriv: sizes.iter().map(|&m| &identity * m as f64).collect(),
            sizes: sizes.to_vec(),
            dim: d,
        })
    }

    pub fn n_total(&self) -> usize {
        self.sizes.iter().sum()
    }

    /// det of the sandwich assembled with per-cluster weights `w`.
    pub fn det_sigma(&self, w: &[f64]) -> Result<f64> {
        let d = self.dim;
        let n_total = self.n_total() as f64;
        let mut meat = DMatrix::zeros(d, d);
        let mut bread = DMatrix::zeros(d, d);
        for i in 0..self.sizes.len() {
            let wi = w[i];
            meat += (&self.same[i] + &self.cross[i]) * (wi * wi);
            bread += &self.deriv[i] * wi;
        }
        meat /= n_total;
        bread /= n_total;
        let cond = crate::asymptotics::condition_number(&bread);
        if !cond.is_finite() || cond >= MAX_BREAD_CONDITION {
            return Err(Error::SingularBread {
                family: "weight_design objective".into(),
                point: vec![],
                condition: cond,
            });
        }
        let inv = bread.try_inverse().ok_or(Error::NonPositiveDeterminant { value: 0.0 })?;
        let sigma = &inv * meat * inv.transpose();
        Ok(sigma.determinant())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OptimizeOptions {
    /// Smallest admissible weight after normalization.
    pub floor: f64,
    /// Stop when a full sweep improves the objective by less than this.
    pub objective_tol: f64,
    pub max_sweeps: usize,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        Self {
            floor: 1e-6,
            objective_tol: 1e-12,
            max_sweeps: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct WeightOptimizationResult {
    /// Per-cluster weights, normalized so (1/N_n) sum m_i w_i = 1.
    pub weights: Vec<f64>,
    /// det of the sandwich at the returned weights.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimizes det(sigma) over per-cluster weights for the moments of a
/// single sample evaluated at `a`.
pub fn optimize_weights(
    sample: &ClusteredSample,
    family: &EstimatorFamily,
    a: &Point,
    opts: &OptimizeOptions,
) -> Result<WeightOptimizationResult> {
    let moments = ClusterMoments::from_sample(sample, family, a)?;
    optimize_weights_moments(&moments, opts)
}

/// Minimizes det(sigma) over per-cluster weights for precomputed moments.
pub fn optimize_weights_moments(
    moments: &ClusterMoments,
    opts: &OptimizeOptions,
) -> Result<WeightOptimizationResult> {
    let n = moments.sizes.len();
    let mut log_w = vec![0.0_f64; n];
    let eval = |log_w: &[f64]| -> f64 {
        let w: Vec<f64> = log_w.iter().map(|l| l.exp()).collect();
        moments.det_sigma(&w).unwrap_or(f64::INFINITY)
    };
    let mut best = eval(&log_w);
    let mut iterations = 0;
    let mut converged = false;

    // Cyclic coordinate descent with golden-section line search per
    // coordinate, in log space.
    for _ in 0..opts.max_sweeps {
        iterations += 1;
        let before = best;
        for i in 0..n {
            let f = |v: f64| {
                let mut trial = log_w.clone();
                trial[i] = v;
                eval(&trial)
            };
            let (v, fv) = golden_section(f, log_w[i] - 4.0, log_w[i] + 4.0, 1e-10);
            if fv < best {
                log_w[i] = v;
                best = fv;
            }
        }
        if before - best < opts.objective_tol {
            converged = true;
            break;
        }
    }

    // Nelder-Mead polish as a cross-check against coordinate-wise stalls.
    let (polished, polished_obj, nm_evals) = nelder_mead(&log_w, 0.1, 400, eval);
    iterations += nm_evals / n.max(1);
    if polished_obj < best {
        log_w = polished;
    }

    let mut weights: Vec<f64> = log_w.iter().map(|l| l.exp()).collect();
    symmetrize_equal_sizes(&mut weights, &moments.sizes);
    normalize_cluster_weights(&mut weights, &moments.sizes, opts.floor);
    let objective = moments.det_sigma(&weights)?;
    Ok(WeightOptimizationResult {
        weights,
        objective,
        iterations,
        converged,
    })
}

/// Averages weights within identical-size groups (flat directions of the
/// objective when clusters are exchangeable).
fn symmetrize_equal_sizes(weights: &mut [f64], sizes: &[usize]) {
    let mut distinct: Vec<usize> = sizes.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    for m in distinct {
        let idx: Vec<usize> = (0..sizes.len()).filter(|&i| sizes[i] == m).collect();
        if idx.len() > 1 {
            let mean = idx.iter().map(|&i| weights[i]).sum::<f64>() / idx.len() as f64;
            for &i in &idx {
                weights[i] = mean;
            }
        }
    }
}

/// Rescales so sum m_i w_i = N_n and clamps at the floor.
pub fn normalize_cluster_weights(weights: &mut [f64], sizes: &[usize], floor: f64) {
    let n_total: f64 = sizes.iter().sum::<usize>() as f64;
    let total: f64 = weights
        .iter()
        .zip(sizes)
        .map(|(w, &m)| w * m as f64)
        .sum();
    let scale = n_total / total;
    for w in weights.iter_mut() {
        *w = (*w * scale).max(floor);
    }
}

/// Optimal equicorrelated weights: w_i proportional to
/// 1 / (1 + (m_i - 1) tau), normalized to sum m_i w_i = N_n.
///
/// This minimizes sum_i m_i w_i^2 (1 + (m_i - 1) tau) under the
/// normalization constraint (Lagrange stationarity gives the reciprocal
/// form; the objective is strictly convex in w).
pub fn closed_form_weights(sizes: &[usize], tau: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::OutOfRange {
            what: format!("tau must lie in [0, 1), got {tau}"),
        });
    }
    let n_total: f64 = sizes.iter().sum::<usize>() as f64;
    let raw: Vec<f64> = sizes
        .iter()
        .map(|&m| 1.0 / (1.0 + (m as f64 - 1.0) * tau))
        .collect();
    let denom: f64 = raw.iter().zip(sizes).map(|(r, &m)| r * m as f64).sum();
    let lambda = n_total / denom;
    Ok(raw.into_iter().map(|r| r * lambda).collect())
}

/// Builds a per-cluster weight scheme from an optimization result.
pub fn to_weight_scheme(result: &WeightOptimizationResult) -> Result<WeightScheme> {
    WeightScheme::per_cluster(result.weights.clone())
}

fn golden_section<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        }
    }
    let mid = (lo + hi) / 2.0;
    let fm = f(mid);
    if fm <= f1 && fm <= f2 {
        (mid, fm)
    } else if f1 <= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Minimal Nelder-Mead on R^n; returns (best point, best value, evals).
fn nelder_mead<F: Fn(&[f64]) -> f64>(
    start: &[f64],
    spread: f64,
    max_evals: usize,
    f: F,
) -> (Vec<f64>, f64, usize) {
    let n = start.len();
    let mut evals = 0;
    let eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        f(x)
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((start.to_vec(), eval(start, &mut evals)));
    for i in 0..n {
        let mut v = start.to_vec();
        v[i] += spread;
        let fv = eval(&v, &mut evals);
        simplex.push((v, fv));
    }
    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let worst = simplex[n].clone();
        let mut centroid = vec![0.0; n];
        for (v, _) in simplex.iter().take(n) {
            for j in 0..n {
                centroid[j] += v[j] / n as f64;
            }
        }
        let reflect: Vec<f64> = (0..n).map(|j| 2.0 * centroid[j] - worst.0[j]).collect();
        let fr = eval(&reflect, &mut evals);
        if fr < simplex[0].1 {
            let expand: Vec<f64> = (0..n).map(|j| 3.0 * centroid[j] - 2.0 * worst.0[j]).collect();
            let fe = eval(&expand, &mut evals);
            simplex[n] = if fe < fr { (expand, fe) } else { (reflect, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (reflect, fr);
        } else {
            let contract: Vec<f64> = (0..n)
                .map(|j| 0.5 * (centroid[j] + worst.0[j]))
                .collect();
            let fc = eval(&contract, &mut evals);
            if fc < worst.1 {
                simplex[n] = (contract, fc);
            } else {
                // shrink toward the best vertex
                let best = simplex[0].0.clone();
                for k in 1..=n {
                    let v: Vec<f64> = (0..n)
                        .map(|j| 0.5 * (best[j] + simplex[k].0[j]))
                        .collect();
                    let fv = eval(&v, &mut evals);
                    simplex[k] = (v, fv);
                }
            }
        }
        let spread_now = simplex[n].1 - simplex[0].1;
        if spread_now.abs() < 1e-14 {
            break;
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    (simplex[0].0.clone(), simplex[0].1, evals)
}
