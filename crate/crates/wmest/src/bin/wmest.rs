//! Command-line interface for weighted M-estimation on clustered data.
//!
//! Exit codes: 0 on success, 1 on input errors (arguments, CSV, JSON),
//! 2 on numerical failures (non-convergence, singular systems, reference
//! mismatches under `reproduce`).

use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use wmest::asymptotics::sigma_hat;
use wmest::breakdown::{breakdown_exact, expand_per_observation, spatial_median_eps};
use wmest::error::Error;
use wmest::io;
use wmest::model::{EstimatorFamily, WeightScheme};
use wmest::reproduce::{reproduce_table, TABLE_NAMES};
use wmest::simulation::{averaged_moments, ClusterConfiguration, DistributionSpec};
use wmest::solver::{solve, SolveOptions};
use wmest::weight_design::{optimize_weights_moments, OptimizeOptions};

const EXIT_INPUT: i32 = 1;
const EXIT_NUMERICAL: i32 = 2;

#[derive(Parser)]
#[command(name = "wmest", version, about = "Weighted M-estimation for clustered data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a location estimate and its sandwich covariance from a sample CSV.
    Estimate(EstimateArgs),
    /// Compute efficiency-optimal per-cluster weights from a JSON job file.
    OptimizeWeights(OptimizeArgs),
    /// Exact breakdown count of a weighting scheme.
    Breakdown(BreakdownArgs),
    /// Recompute a reference table and report agreement.
    Reproduce(ReproduceArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Mean,
    SpatialMedian,
    Huber,
    LpMedian,
}

#[derive(Args)]
struct EstimateArgs {
    /// Sample CSV with header cluster_id,x1,...,xd.
    sample: PathBuf,
    /// Per-cluster weights CSV (cluster_id,weight); defaults to unit weights.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "mean")]
    family: FamilyArg,
    /// Huber truncation radius.
    #[arg(long, default_value_t = 1.345)]
    huber_k: f64,
    /// Exponent for the Lp family (p > 2).
    #[arg(long, default_value_t = 3.0)]
    lp_p: f64,
    /// Gradient norm tolerance for the solver.
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    /// Directory for theta.csv, covariance.csv and the run manifest.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct OptimizeArgs {
    /// JSON job description (configuration, distribution, estimator, seed).
    config: PathBuf,
    /// Seed override; falls back to the value in the job file.
    #[arg(long, env = "WMEST_SEED")]
    seed: Option<u64>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct BreakdownArgs {
    /// Weights CSV: either cluster_id,m_i,w_i or cluster_id,weight.
    weights: PathBuf,
    /// Breakdown fraction of the unweighted estimator.
    #[arg(long, conflicts_with = "spatial_median_exact")]
    eps_star: Option<f64>,
    /// Use the exact spatial-median fraction floor((N-1)/2)/N.
    #[arg(long)]
    spatial_median_exact: bool,
}

#[derive(Args)]
struct ReproduceArgs {
    /// One of: weights, efficiency-gaussian, efficiency-cauchy,
    /// efficiency-student3, breakdown.
    #[arg(long)]
    table: String,
    #[arg(long, env = "WMEST_SEED", default_value_t = 42)]
    seed: u64,
    /// Monte Carlo replications (weight calibration replications for the
    /// weights table).
    #[arg(long, default_value_t = 500)]
    replications: usize,
    /// Optional directory for the rendered table and run manifest.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Deserialize)]
struct OptimizeJob {
    configuration: ClusterConfiguration,
    distribution: DistributionSpec,
    estimator: EstimatorFamily,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_moment_replications")]
    moment_replications: usize,
}

fn default_moment_replications() -> usize {
    300
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: Option<String>,
    seed: Option<u64>,
    version: String,
    started_at: String,
    finished_at: String,
    outputs: Vec<String>,
}

fn write_manifest(
    out_dir: &Path,
    command: &str,
    config: Option<&Path>,
    seed: Option<u64>,
    started_at: &str,
    outputs: &[PathBuf],
) -> Result<(), Error> {
    let manifest = RunManifest {
        command: command.to_string(),
        config: config.map(|p| p.display().to_string()),
        seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        started_at: started_at.to_string(),
        finished_at: now(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    let path = out_dir.join("run_manifest.json");
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(path, body)?;
    Ok(())
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true)
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_INPUT,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    };
    std::process::exit(code);
}

fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::SingularBread { .. } | Error::NonPositiveDeterminant { .. } => EXIT_NUMERICAL,
        _ => EXIT_INPUT,
    }
}

fn run(cli: Cli) -> Result<i32, Error> {
    match cli.command {
        Command::Estimate(args) => cmd_estimate(args),
        Command::OptimizeWeights(args) => cmd_optimize(args),
        Command::Breakdown(args) => cmd_breakdown(args),
        Command::Reproduce(args) => cmd_reproduce(args),
    }
}

fn resolve_family(args: &EstimateArgs) -> Result<EstimatorFamily, Error> {
    Ok(match args.family {
        FamilyArg::Mean => EstimatorFamily::Mean,
        FamilyArg::SpatialMedian => EstimatorFamily::SpatialMedian,
        FamilyArg::Huber => {
            if !(args.huber_k > 0.0) {
                return Err(Error::OutOfRange {
                    what: format!("huber-k must be positive, got {}", args.huber_k),
                });
            }
            EstimatorFamily::Huber { k: args.huber_k }
        }
        FamilyArg::LpMedian => {
            if !(args.lp_p > 2.0) {
                return Err(Error::OutOfRange {
                    what: format!("lp-p must exceed 2, got {}", args.lp_p),
                });
            }
            EstimatorFamily::LpMedian { p: args.lp_p }
        }
    })
}

fn cmd_estimate(args: EstimateArgs) -> Result<i32, Error> {
    let started = now();
    let family = resolve_family(&args)?;
    let (sample, ids) = io::read_sample(&args.sample)?;
    let weights = match &args.weights {
        Some(path) => io::read_weights(path, &ids)?.normalized(&sample)?,
        None => WeightScheme::unweighted(sample.n_clusters()),
    };
    let opts = SolveOptions {
        gradient_tol: args.tol,
        ..SolveOptions::default()
    };
    let fit = solve(&sample, &weights, &family, &opts)?;
    if !fit.converged {
        eprintln!(
            "solver did not converge after {} iterations (gradient norm {:.3e})",
            fit.iterations, fit.final_gradient_norm
        );
        return Ok(EXIT_NUMERICAL);
    }
    let report = sigma_hat(&sample, &weights, &family, &fit.theta_hat)?;

    std::fs::create_dir_all(&args.out_dir)?;
    let theta_path = args.out_dir.join("theta.csv");
    let cov_path = args.out_dir.join("covariance.csv");
    io::write_point(&theta_path, &fit.theta_hat)?;
    io::write_covariance(
        &cov_path,
        &[
            ("b_hat", &report.b_hat),
            ("c_hat", &report.c_hat),
            ("v_hat", &report.v_hat),
            ("sigma_hat", &report.sigma_hat),
        ],
        report.condition_v,
    )?;
    write_manifest(
        &args.out_dir,
        "estimate",
        Some(&args.sample),
        None,
        &started,
        &[theta_path.clone(), cov_path.clone()],
    )?;
    println!(
        "{}: converged in {} iterations, theta written to {}",
        family.name(),
        fit.iterations,
        theta_path.display()
    );
    Ok(0)
}

fn cmd_optimize(args: OptimizeArgs) -> Result<i32, Error> {
    let started = now();
    let raw = std::fs::read_to_string(&args.config)?;
    let job: OptimizeJob = serde_json::from_str(&raw).map_err(|e| Error::Csv {
        line: e.line() as u64,
        msg: format!("job file: {e}"),
    })?;
    job.distribution.validate()?;
    let seed = args.seed.unwrap_or(job.seed);
    let moments = averaged_moments(
        &job.configuration,
        &job.distribution,
        &job.estimator,
        seed,
        job.moment_replications,
    )?;
    let result = optimize_weights_moments(&moments, &OptimizeOptions::default())?;

    std::fs::create_dir_all(&args.out_dir)?;
    let weights_path = args.out_dir.join("weights.csv");
    io::write_weights(&weights_path, &job.configuration.sizes, &result.weights)?;
    write_manifest(
        &args.out_dir,
        "optimize-weights",
        Some(&args.config),
        Some(seed),
        &started,
        &[weights_path.clone()],
    )?;
    println!(
        "objective {:.6e} after {} sweeps (converged: {}), weights written to {}",
        result.objective,
        result.iterations,
        result.converged,
        weights_path.display()
    );
    Ok(0)
}

/// Reads per-observation weights from either the three-column
/// (cluster_id,m_i,w_i) or two-column (cluster_id,weight) layout.
fn read_breakdown_weights(path: &Path) -> Result<Vec<f64>, Error> {
    let raw = std::fs::read_to_string(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(raw.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Csv { line: 1, msg: e.to_string() })?
        .clone();
    let has_sizes = headers.iter().any(|h| h == "m_i");
    let mut cluster_weights = Vec::new();
    let mut sizes = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = (idx + 2) as u64;
        let record = record.map_err(|e| Error::Csv { line, msg: e.to_string() })?;
        let parse = |field: usize, what: &str| -> Result<f64, Error> {
            record
                .get(field)
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|_| Error::Csv {
                    line,
                    msg: format!("{what} is not a number"),
                })
        };
        if has_sizes {
            sizes.push(parse(1, "m_i")? as usize);
            cluster_weights.push(parse(2, "w_i")?);
        } else {
            sizes.push(1);
            cluster_weights.push(parse(1, "weight")?);
        }
    }
    Ok(expand_per_observation(&cluster_weights, &sizes))
}

fn cmd_breakdown(args: BreakdownArgs) -> Result<i32, Error> {
    let mut weights = read_breakdown_weights(&args.weights)?;
    if weights.is_empty() {
        return Err(Error::EmptySample);
    }
    let n = weights.len() as f64;
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::OutOfRange {
            what: "weights must have a positive sum".into(),
        });
    }
    for w in weights.iter_mut() {
        *w *= n / total;
    }
    let eps = match (args.eps_star, args.spatial_median_exact) {
        (Some(eps), false) => eps,
        (None, true) => spatial_median_eps(weights.len())?,
        _ => {
            return Err(Error::OutOfRange {
                what: "pass exactly one of --eps-star or --spatial-median-exact".into(),
            })
        }
    };
    let report = breakdown_exact(&weights, eps)?;
    println!(
        "n={} eps_star={:.6} k_star={} epsilon_star={:.4} prefix_sum={:.4}",
        weights.len(),
        eps,
        report.k_star,
        report.epsilon_star,
        report.prefix_sum_at_k
    );
    Ok(0)
}

fn cmd_reproduce(args: ReproduceArgs) -> Result<i32, Error> {
    if !TABLE_NAMES.contains(&args.table.as_str()) {
        return Err(Error::OutOfRange {
            what: format!(
                "unknown table '{}', expected one of {}",
                args.table,
                TABLE_NAMES.join(", ")
            ),
        });
    }
    let started = now();
    let report = reproduce_table(&args.table, args.seed, args.replications)?;
    let rendered = report.render();
    print!("{rendered}");
    if let Some(out_dir) = &args.out_dir {
        std::fs::create_dir_all(out_dir)?;
        let table_path = out_dir.join(format!("{}.txt", args.table));
        std::fs::write(&table_path, &rendered)?;
        write_manifest(
            out_dir,
            "reproduce",
            None,
            Some(args.seed),
            &started,
            &[table_path],
        )?;
    }
    Ok(if report.all_within() { 0 } else { EXIT_NUMERICAL })
}
