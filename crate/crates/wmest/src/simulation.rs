//! Clustered-sample generation and the Monte Carlo experiment harness.
//!
//! Gaussian clusters use a shared-factor construction per component,
//! X = sqrt(rho) Z_cluster + sqrt(1 - rho) E_obs, so the within-cluster
//! correlation is exactly rho and components are independent. Student
//! clusters divide the Gaussian draws by a cluster-shared sqrt(chi2_nu /
//! nu) factor, which preserves within-cluster exchangeability; Cauchy is
//! Student with one degree of freedom. Replication streams are split off
//! the master seed by stream index, so any scheduling of replications
//! produces identical output.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::asymptotics::{sigma_hat, CovarianceReport};
use crate::error::{Error, Result};
use crate::model::{ClusteredSample, EstimatorFamily, Matrix, Point, WeightScheme};
use crate::solver::{solve, SolveOptions};
use crate::weight_design::{optimize_weights_moments, ClusterMoments, OptimizeOptions};

/// Stream offset separating weight-calibration replications from
/// estimation replications under the same master seed.
const MOMENT_STREAM_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterConfiguration {
    pub name: String,
    pub sizes: Vec<usize>,
}

impl ClusterConfiguration {
    /// Nine clusters of 4 and one of 64.
    pub fn c1() -> Self {
        let mut sizes = vec![4; 9];
        sizes.push(64);
        Self { name: "C1".into(), sizes }
    }

    /// Five clusters of 4 and five of 16.
    pub fn c2() -> Self {
        let mut sizes = vec![4; 5];
        sizes.extend(vec![16; 5]);
        Self { name: "C2".into(), sizes }
    }

    /// Two clusters of 4, one of 8, seven of 12.
    pub fn c3() -> Self {
        let mut sizes = vec![4; 2];
        sizes.push(8);
        sizes.extend(vec![12; 7]);
        Self { name: "C3".into(), sizes }
    }

    /// Ten clusters of sizes 5..=15 excluding 10.
    pub fn c4() -> Self {
        let sizes = (5..=15).filter(|&m| m != 10).collect();
        Self { name: "C4".into(), sizes }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name.to_ascii_uppercase().as_str() {
            "C1" => Some(Self::c1()),
            "C2" => Some(Self::c2()),
            "C3" => Some(Self::c3()),
            "C4" => Some(Self::c4()),
            _ => None,
        }
    }

    pub fn standard() -> [Self; 4] {
        [Self::c1(), Self::c2(), Self::c3(), Self::c4()]
    }

    pub fn n_total(&self) -> usize {
        self.sizes.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum DistributionFamily {
    Gaussian,
    Student { nu: f64 },
    Cauchy,
}

impl DistributionFamily {
    fn degrees_of_freedom(&self) -> Option<f64> {
        match *self {
            DistributionFamily::Gaussian => None,
            DistributionFamily::Student { nu } => Some(nu),
            DistributionFamily::Cauchy => Some(1.0),
        }
    }

    pub fn label(&self) -> String {
        match *self {
            DistributionFamily::Gaussian => "gaussian".into(),
            DistributionFamily::Cauchy => "cauchy".into(),
            DistributionFamily::Student { nu } => format!("student{nu}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSpec {
    #[serde(flatten)]
    pub family: DistributionFamily,
    pub rho: f64,
    #[serde(default = "default_dim")]
    pub d: usize,
    /// True location; defaults to the origin.
    #[serde(default)]
    pub theta: Vec<f64>,
}

fn default_dim() -> usize {
    2
}

impl DistributionSpec {
    pub fn new(family: DistributionFamily, rho: f64, d: usize) -> Result<Self> {
        let spec = Self {
            family,
            rho,
            d,
            theta: vec![0.0; d],
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::OutOfRange {
                what: format!("rho must lie in (0, 1), got {}", self.rho),
            });
        }
        if let Some(nu) = self.family.degrees_of_freedom() {
            if !(nu >= 1.0) {
                return Err(Error::OutOfRange {
                    what: format!("degrees of freedom must be >= 1, got {nu}"),
                });
            }
        }
        if self.d == 0 {
            return Err(Error::OutOfRange {
                what: "dimension must be at least 1".into(),
            });
        }
        if !self.theta.is_empty() && self.theta.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: self.theta.len(),
            });
        }
        Ok(())
    }

    pub fn theta_point(&self) -> Point {
        if self.theta.is_empty() {
            DVector::zeros(self.d)
        } else {
            DVector::from_row_slice(&self.theta)
        }
    }
}

/// Deterministic per-replication RNG: master seed keys the cipher,
/// the replication index selects the stream.
pub fn replication_rng(master_seed: u64, replication: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(replication);
    rng
}

/// Draws one clustered sample with exchangeable within-cluster
/// correlation `rho` and independent components.
pub fn generate_sample_with_rng(
    cfg: &ClusterConfiguration,
    dist: &DistributionSpec,
    rng: &mut ChaCha8Rng,
) -> Result<ClusteredSample> {
    dist.validate()?;
    let d = dist.d;
    let theta = dist.theta_point();
    let sqrt_rho = dist.rho.sqrt();
    let sqrt_one_minus = (1.0 - dist.rho).sqrt();
    let chi = dist
        .family
        .degrees_of_freedom()
        .map(|nu| (nu, ChiSquared::new(nu).expect("valid dof")));

    let mut clusters = Vec::with_capacity(cfg.sizes.len());
    for &m in &cfg.sizes {
        // One shared Gaussian factor per component and, for Student
        // tails, one shared scale divisor per cluster.
        let shared: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let scale = match &chi {
            Some((nu, chi2)) => (chi2.sample(rng) / nu).sqrt(),
            None => 1.0,
        };
        let mut cluster = Vec::with_capacity(m);
        for _ in 0..m {
            let mut point = DVector::zeros(d);
            for c in 0..d {
                let eps: f64 = rng.sample(StandardNormal);
                point[c] = theta[c] + (sqrt_rho * shared[c] + sqrt_one_minus * eps) / scale;
            }
            cluster.push(point);
        }
        clusters.push(cluster);
    }
    ClusteredSample::new(clusters)
}

/// Seed-deterministic sample generation.
pub fn generate_sample(
    cfg: &ClusterConfiguration,
    dist: &DistributionSpec,
    seed: u64,
) -> Result<ClusteredSample> {
    let mut rng = replication_rng(seed, 0);
    generate_sample_with_rng(cfg, dist, &mut rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightsSource {
    Unweighted,
    /// Optimize per-cluster weights on replication-averaged score moments
    /// at the true location before the estimation runs.
    Optimal,
    /// Fixed per-cluster weights supplied by the caller.
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalPoint {
    TrueTheta,
    Estimated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub configuration: ClusterConfiguration,
    pub distribution: DistributionSpec,
    pub estimators: Vec<EstimatorFamily>,
    pub weights_source: WeightsSource,
    pub replications: usize,
    pub seed: u64,
    pub eval_point: EvalPoint,
    /// Replications used to average score moments for weight calibration.
    #[serde(default = "default_moment_replications")]
    pub moment_replications: usize,
}

fn default_moment_replications() -> usize {
    300
}

#[derive(Debug, Clone)]
pub struct EstimatorSummary {
    pub family: EstimatorFamily,
    /// Per-cluster weights actually used by the weighted runs.
    pub weights: Vec<f64>,
    /// Sandwich assembled from replication-averaged components.
    pub avg_sigma_weighted: Matrix,
    pub avg_sigma_unweighted: Matrix,
    pub det_weighted: f64,
    pub det_unweighted: f64,
    /// (det unweighted / det weighted)^(1/d).
    pub ef_hat: f64,
    /// Empirical covariance of sqrt(N)(theta_hat_w - theta) across
    /// replications.
    pub empirical_cov_weighted: Matrix,
    pub mean_theta_weighted: Point,
    pub replications_used: usize,
    pub failures: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub summaries: Vec<EstimatorSummary>,
}

impl ExperimentReport {
    pub fn summary_for(&self, family: &EstimatorFamily) -> Option<&EstimatorSummary> {
        self.summaries.iter().find(|s| &s.family == family)
    }
}

/// Averaged per-cluster score moments at the true location, for weight
/// calibration.
pub fn averaged_moments(
    cfg: &ClusterConfiguration,
    dist: &DistributionSpec,
    family: &EstimatorFamily,
    seed: u64,
    replications: usize,
) -> Result<ClusterMoments> {
    let theta = dist.theta_point();
    let mut sets = Vec::with_capacity(replications);
    for r in 0..replications {
        let mut rng = replication_rng(seed, MOMENT_STREAM_BASE + r as u64);
        let sample = generate_sample_with_rng(cfg, dist, &mut rng)?;
        sets.push(ClusterMoments::from_sample(&sample, family, &theta)?);
    }
    ClusterMoments::average(&sets)
}

/// Optimal per-cluster weights for one (configuration, distribution,
/// estimator) triple, from replication-averaged moments.
pub fn calibrate_optimal_weights(
    cfg: &ClusterConfiguration,
    dist: &DistributionSpec,
    family: &EstimatorFamily,
    seed: u64,
    replications: usize,
) -> Result<Vec<f64>> {
    let moments = averaged_moments(cfg, dist, family, seed, replications)?;
    let result = optimize_weights_moments(&moments, &OptimizeOptions::default())?;
    Ok(result.weights)
}

/// Runs the Monte Carlo experiment described by `cfg`.
///
/// Replication failures (solver non-convergence, singular bread) are
/// counted and skipped; they never abort the run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.distribution.validate()?;
    if cfg.replications == 0 {
        return Err(Error::OutOfRange {
            what: "replications must be at least 1".into(),
        });
    }
    let theta = cfg.distribution.theta_point();
    let d = cfg.distribution.d;
    let n_clusters = cfg.configuration.sizes.len();
    let n_total = cfg.configuration.n_total() as f64;
    let solve_opts = SolveOptions::default();

    let mut summaries = Vec::with_capacity(cfg.estimators.len());
    for family in &cfg.estimators {
        let weights_vec = match &cfg.weights_source {
            WeightsSource::Unweighted => vec![1.0; n_clusters],
            WeightsSource::Explicit(w) => w.clone(),
            WeightsSource::Optimal => calibrate_optimal_weights(
                &cfg.configuration,
                &cfg.distribution,
                family,
                cfg.seed,
                cfg.moment_replications,
            )?,
        };
        let weighted = WeightScheme::per_cluster(weights_vec.clone())?;
        let unweighted = WeightScheme::unweighted(n_clusters);

        // Components are averaged across replications before assembling
        // the sandwich: inverting the per-replication bread correlates
        // with the meat and inflates the averaged covariance when a
        // large cluster dominates.
        let mut sums_w = ComponentSums::zeros(d);
        let mut sums_u = ComponentSums::zeros(d);
        let mut thetas_w: Vec<Point> = Vec::with_capacity(cfg.replications);
        let mut failures = 0usize;

        for r in 0..cfg.replications {
            let mut rng = replication_rng(cfg.seed, r as u64);
            let sample = generate_sample_with_rng(&cfg.configuration, &cfg.distribution, &mut rng)?;
            match replicate_once(
                &sample,
                &weighted,
                &unweighted,
                family,
                &theta,
                cfg.eval_point,
                &solve_opts,
            ) {
                Ok((theta_w, sigma_w, sigma_u)) => {
                    sums_w.add(&sigma_w);
                    sums_u.add(&sigma_u);
                    thetas_w.push(theta_w);
                }
                Err(_) => failures += 1,
            }
        }

        let used = thetas_w.len();
        if used == 0 {
            return Err(Error::OutOfRange {
                what: format!("all replications failed for {}", family.name()),
            });
        }
        let avg_sigma_weighted = sums_w.assemble(used)?;
        let avg_sigma_unweighted = sums_u.assemble(used)?;
        let det_weighted = avg_sigma_weighted.determinant();
        let det_unweighted = avg_sigma_unweighted.determinant();
        let ef_hat =
            crate::asymptotics::efficiency_from_dets(det_unweighted, det_weighted, d)?;

        let mut mean_theta = DVector::zeros(d);
        for t in &thetas_w {
            mean_theta += t;
        }
        mean_theta /= used as f64;
        let mut emp_cov = DMatrix::zeros(d, d);
        for t in &thetas_w {
            let dev = (t - &theta) * n_total.sqrt();
            emp_cov += &dev * dev.transpose();
        }
        emp_cov /= used as f64;

        summaries.push(EstimatorSummary {
            family: *family,
            weights: weights_vec,
            avg_sigma_weighted,
            avg_sigma_unweighted,
            det_weighted,
            det_unweighted,
            ef_hat,
            empirical_cov_weighted: emp_cov,
            mean_theta_weighted: mean_theta,
            replications_used: used,
            failures,
        });
    }

    Ok(ExperimentReport {
        config: cfg.clone(),
        summaries,
    })
}

struct ComponentSums {
    b: Matrix,
    c: Matrix,
    v: Matrix,
}

impl ComponentSums {
    fn zeros(d: usize) -> Self {
        Self {
            b: DMatrix::zeros(d, d),
            c: DMatrix::zeros(d, d),
            v: DMatrix::zeros(d, d),
        }
    }

    fn add(&mut self, report: &CovarianceReport) {
        self.b += &report.b_hat;
        self.c += &report.c_hat;
        self.v += &report.v_hat;
    }

    fn assemble(&self, used: usize) -> Result<Matrix> {
        let r = used as f64;
        crate::asymptotics::assemble_sandwich(&(&self.b / r), &(&self.c / r), &(&self.v / r))
    }
}

type ReplicationOutcome = (Point, CovarianceReport, CovarianceReport);

fn replicate_once(
    sample: &ClusteredSample,
    weighted: &WeightScheme,
    unweighted: &WeightScheme,
    family: &EstimatorFamily,
    theta: &Point,
    eval_point: EvalPoint,
    solve_opts: &SolveOptions,
) -> Result<ReplicationOutcome> {
    let fit_w = solve(sample, weighted, family, solve_opts)?;
    if !fit_w.converged {
        return Err(Error::OutOfRange {
            what: "weighted solve did not converge".into(),
        });
    }
    let (eval_w, eval_u) = match eval_point {
        EvalPoint::TrueTheta => (theta.clone(), theta.clone()),
        EvalPoint::Estimated => {
            let fit_u = solve(sample, unweighted, family, solve_opts)?;
            if !fit_u.converged {
                return Err(Error::OutOfRange {
                    what: "unweighted solve did not converge".into(),
                });
            }
            (fit_w.theta_hat.clone(), fit_u.theta_hat)
        }
    };
    let sigma_w = sigma_hat(sample, weighted, family, &eval_w)?;
    let sigma_u = sigma_hat(sample, unweighted, family, &eval_u)?;
    Ok((fit_w.theta_hat, sigma_w, sigma_u))
}
