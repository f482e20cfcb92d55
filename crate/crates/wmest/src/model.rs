//! Clustered-data model: samples, weight schemes and estimator families.
//!
//! A sample is a list of clusters, each an ordered list of points in R^d.
//! Weights are statistician-chosen positive reals attached either to whole
//! clusters or to individual observations; in normalized form they average
//! to one over all observations. Estimator families supply the loss `rho`,
//! its location gradient `psi` and the derivative `psi_dot` used by the
//! covariance estimators.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance under which two points are treated as tied for the
/// spatial-median score (the subgradient 0 is selected there).
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Default Huber tuning constant (95% Gaussian efficiency in 1-d).
pub const DEFAULT_HUBER_K: f64 = 1.345;

pub type Point = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// n independent clusters of points in R^d.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredSample {
    clusters: Vec<Vec<Point>>,
    dim: usize,
}

impl ClusteredSample {
    pub fn new(clusters: Vec<Vec<Point>>) -> Result<Self> {
        let dim = clusters
            .first()
            .and_then(|c| c.first())
            .map(|p| p.len())
            .ok_or(Error::EmptySample)?;
        if clusters.iter().any(|c| c.is_empty()) {
            return Err(Error::EmptySample);
        }
        for p in clusters.iter().flatten() {
            if p.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: p.len(),
                });
            }
        }
        Ok(Self { clusters, dim })
    }

    /// Builds a sample of singleton clusters (the i.i.d. setting).
    pub fn from_singletons(points: Vec<Point>) -> Result<Self> {
        Self::new(points.into_iter().map(|p| vec![p]).collect())
    }

    pub fn clusters(&self) -> &[Vec<Point>] {
        &self.clusters
    }

    /// Number of clusters n.
    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// Cluster sizes m_i.
    pub fn sizes(&self) -> Vec<usize> {
        self.clusters.iter().map(|c| c.len()).collect()
    }

    /// Total number of observations N_n.
    pub fn n_total(&self) -> usize {
        self.clusters.iter().map(|c| c.len()).sum()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn iter_points(&self) -> impl Iterator<Item = &Point> {
        self.clusters.iter().flatten()
    }

    /// Returns the sample with `shift` added to every point.
    pub fn translated(&self, shift: &Point) -> Self {
        Self {
            clusters: self
                .clusters
                .iter()
                .map(|c| c.iter().map(|p| p + shift).collect())
                .collect(),
            dim: self.dim,
        }
    }
}

/// Positive weights, one per cluster or one per observation.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightScheme {
    PerCluster(Vec<f64>),
    PerObservation(Vec<Vec<f64>>),
}

impl WeightScheme {
    /// Uniform weights w == 1 (the unweighted estimator).
    pub fn unweighted(n_clusters: usize) -> Self {
        WeightScheme::PerCluster(vec![1.0; n_clusters])
    }

    pub fn per_cluster(weights: Vec<f64>) -> Result<Self> {
        check_positive(&weights)?;
        Ok(WeightScheme::PerCluster(weights))
    }

    pub fn is_per_cluster(&self) -> bool {
        matches!(self, WeightScheme::PerCluster(_))
    }

    /// Per-cluster values, or an error for genuinely per-observation schemes.
    pub fn cluster_values(&self, op: &'static str) -> Result<&[f64]> {
        match self {
            WeightScheme::PerCluster(w) => Ok(w),
            WeightScheme::PerObservation(_) => Err(Error::PerClusterRequired { op }),
        }
    }

    fn validate_shape(&self, sample: &ClusteredSample) -> Result<()> {
        match self {
            WeightScheme::PerCluster(w) => {
                check_positive(w)?;
                if w.len() != sample.n_clusters() {
                    return Err(Error::WeightCountMismatch {
                        expected: sample.n_clusters(),
                        got: w.len(),
                    });
                }
            }
            WeightScheme::PerObservation(w) => {
                if w.len() != sample.n_clusters() {
                    return Err(Error::WeightCountMismatch {
                        expected: sample.n_clusters(),
                        got: w.len(),
                    });
                }
                for (wi, cluster) in w.iter().zip(sample.clusters()) {
                    check_positive(wi)?;
                    if wi.len() != cluster.len() {
                        return Err(Error::WeightCountMismatch {
                            expected: cluster.len(),
                            got: wi.len(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Expands to one weight per observation, in sample order.
    pub fn expanded(&self, sample: &ClusteredSample) -> Result<Vec<Vec<f64>>> {
        self.validate_shape(sample)?;
        Ok(match self {
            WeightScheme::PerCluster(w) => w
                .iter()
                .zip(sample.clusters())
                .map(|(&wi, cluster)| vec![wi; cluster.len()])
                .collect(),
            WeightScheme::PerObservation(w) => w.clone(),
        })
    }

    /// (1/N_n) sum of all observation weights.
    pub fn mean_weight(&self, sample: &ClusteredSample) -> Result<f64> {
        let expanded = self.expanded(sample)?;
        let total: f64 = expanded.iter().flatten().sum();
        Ok(total / sample.n_total() as f64)
    }

    /// Rescales so the observation weights average exactly to one.
    pub fn normalized(&self, sample: &ClusteredSample) -> Result<WeightScheme> {
        let mean = self.mean_weight(sample)?;
        Ok(match self {
            WeightScheme::PerCluster(w) => {
                WeightScheme::PerCluster(w.iter().map(|wi| wi / mean).collect())
            }
            WeightScheme::PerObservation(w) => WeightScheme::PerObservation(
                w.iter()
                    .map(|wi| wi.iter().map(|wij| wij / mean).collect())
                    .collect(),
            ),
        })
    }

    /// Checks the normalization invariant (1/N_n) sum w_ij = 1 to 1e-12.
    pub fn is_normalized(&self, sample: &ClusteredSample) -> Result<bool> {
        Ok((self.mean_weight(sample)? - 1.0).abs() <= 1e-12)
    }
}

fn check_positive(weights: &[f64]) -> Result<()> {
    for (index, &value) in weights.iter().enumerate() {
        if !(value > 0.0) || !value.is_finite() {
            return Err(Error::NonPositiveWeight { index, value });
        }
    }
    Ok(())
}

/// The rho/psi/psi_dot triple of a location M-estimator.
///
/// All families are of location form rho(x - a); `psi` is the gradient of
/// `rho` in the candidate location `a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EstimatorFamily {
    /// rho = ||x-a||^2 / 2: the (weighted) mean.
    Mean,
    /// rho = ||x-a||: the (weighted) spatial median.
    SpatialMedian,
    /// Quadratic inside radius `k`, linear outside.
    Huber { k: f64 },
    /// rho = ||x-a||^p with Euclidean norm, p > 2.
    LpMedian { p: f64 },
}

impl EstimatorFamily {
    pub fn huber_default() -> Self {
        EstimatorFamily::Huber { k: DEFAULT_HUBER_K }
    }

    pub fn name(&self) -> String {
        match self {
            EstimatorFamily::Mean => "mean".into(),
            EstimatorFamily::SpatialMedian => "spatial_median".into(),
            EstimatorFamily::Huber { .. } => "huber".into(),
            EstimatorFamily::LpMedian { p } => format!("lp_median_p{p}"),
        }
    }

    /// Loss rho(x, a); zero at x == a for every family.
    pub fn rho(&self, x: &Point, a: &Point) -> Result<f64> {
        check_dims(x, a)?;
        let r = (a - x).norm();
        Ok(match *self {
            EstimatorFamily::Mean => 0.5 * r * r,
            EstimatorFamily::SpatialMedian => r,
            EstimatorFamily::Huber { k } => {
                if r <= k {
                    0.5 * r * r
                } else {
                    k * r - 0.5 * k * k
                }
            }
            EstimatorFamily::LpMedian { p } => r.powf(p),
        })
    }

    /// Score psi(x, a) = grad_a rho(x, a).
    ///
    /// For the spatial median the score is undefined at x == a; the zero
    /// vector (a valid subgradient) is returned when ||x-a|| is below
    /// [`TIE_TOLERANCE`].
    pub fn psi(&self, x: &Point, a: &Point) -> Result<Point> {
        check_dims(x, a)?;
        let diff = a - x;
        let r = diff.norm();
        Ok(match *self {
            EstimatorFamily::Mean => diff,
            EstimatorFamily::SpatialMedian => {
                if r < TIE_TOLERANCE {
                    DVector::zeros(a.len())
                } else {
                    diff / r
                }
            }
            EstimatorFamily::Huber { k } => {
                if r <= k {
                    diff
                } else {
                    diff * (k / r)
                }
            }
            EstimatorFamily::LpMedian { p } => {
                if r < TIE_TOLERANCE {
                    DVector::zeros(a.len())
                } else {
                    diff * (p * r.powf(p - 2.0))
                }
            }
        })
    }

    /// Derivative of the score in `a`, with a flag marking evaluation on a
    /// nonsmooth locus (the interior-branch formula is used there).
    pub fn psi_jacobian_flagged(&self, x: &Point, a: &Point) -> Result<(Matrix, bool)> {
        check_dims(x, a)?;
        let d = a.len();
        let diff = a - x;
        let r = diff.norm();
        let identity = Matrix::identity(d, d);
        Ok(match *self {
            EstimatorFamily::Mean => (identity, false),
            EstimatorFamily::SpatialMedian => {
                if r < TIE_TOLERANCE {
                    (identity, true)
                } else {
                    let u = diff / r;
                    ((identity - &u * u.transpose()) / r, false)
                }
            }
            EstimatorFamily::Huber { k } => {
                let on_boundary = (r - k).abs() < TIE_TOLERANCE;
                if r <= k || on_boundary {
                    (identity, on_boundary)
                } else {
                    let u = diff / r;
                    ((identity - &u * u.transpose()) * (k / r), false)
                }
            }
            EstimatorFamily::LpMedian { p } => {
                if r < TIE_TOLERANCE {
                    (Matrix::zeros(d, d), true)
                } else {
                    let u = diff / r;
                    (
                        (identity + &u * u.transpose() * (p - 2.0)) * (p * r.powf(p - 2.0)),
                        false,
                    )
                }
            }
        })
    }

    /// Derivative of the score in `a`.
    pub fn psi_jacobian(&self, x: &Point, a: &Point) -> Result<Matrix> {
        self.psi_jacobian_flagged(x, a).map(|(m, _)| m)
    }
}

fn check_dims(x: &Point, a: &Point) -> Result<()> {
    if x.len() != a.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: a.len(),
        });
    }
    Ok(())
}

/// The weighted empirical objective (1/N_n) sum_ij w_ij rho(X_ij, a).
pub fn objective(
    sample: &ClusteredSample,
    weights: &WeightScheme,
    family: &EstimatorFamily,
    a: &Point,
) -> Result<f64> {
    let expanded = weights.expanded(sample)?;
    let mut total = 0.0;
    for (cluster, wi) in sample.clusters().iter().zip(&expanded) {
        for (x, &wij) in cluster.iter().zip(wi) {
            total += wij * family.rho(x, a)?;
        }
    }
    Ok(total / sample.n_total() as f64)
}

/// The weighted empirical score (1/N_n) sum_ij w_ij psi(X_ij, a).
pub fn score(
    sample: &ClusteredSample,
    weights: &WeightScheme,
    family: &EstimatorFamily,
    a: &Point,
) -> Result<Point> {
    let expanded = weights.expanded(sample)?;
    let mut total = DVector::zeros(sample.dim());
    for (cluster, wi) in sample.clusters().iter().zip(&expanded) {
        for (x, &wij) in cluster.iter().zip(wi) {
            total += family.psi(x, a)? * wij;
        }
    }
    Ok(total / sample.n_total() as f64)
}
