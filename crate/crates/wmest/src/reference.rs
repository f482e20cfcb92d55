//! Embedded reference values for the standard benchmark configurations.
//!
//! The values live in data files under `data/` rather than in code, so
//! the numbers and their tolerances stay auditable in one place.

use std::collections::BTreeMap;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::model::EstimatorFamily;

pub const OPTIMAL_WEIGHTS_CSV: &str = include_str!("../data/reference_optimal_weights.csv");
pub const EFFICIENCY_GAUSSIAN_CSV: &str =
    include_str!("../data/reference_efficiency_gaussian.csv");
pub const EFFICIENCY_CAUCHY_CSV: &str = include_str!("../data/reference_efficiency_cauchy.csv");
pub const EFFICIENCY_STUDENT3_CSV: &str =
    include_str!("../data/reference_efficiency_student3.csv");
pub const BREAKDOWN_CSV: &str = include_str!("../data/reference_breakdown.csv");

#[derive(Debug, Clone, Deserialize)]
pub struct WeightRow {
    pub estimator: String,
    pub config: String,
    pub cluster: usize,
    pub m_i: usize,
    pub w_rho_0_2: f64,
    pub w_rho_0_8: f64,
}

#[derive(Debug, Clone, Deserialize)]
pub struct EfficiencyRow {
    pub config: String,
    pub rho: f64,
    pub estimator: String,
    pub ratio_weighted: f64,
    pub ratio_unweighted: f64,
    pub ef_hat: f64,
}

#[derive(Debug, Clone, Deserialize)]
pub struct BreakdownRow {
    pub estimator: String,
    pub config: String,
    pub rho: f64,
    pub prefix_sum: f64,
    pub epsilon_percent: f64,
}

fn parse<T: for<'de> Deserialize<'de>>(raw: &str) -> Result<Vec<T>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(raw.as_bytes());
    reader
        .deserialize()
        .map(|row| {
            row.map_err(|e| Error::Csv {
                line: e.position().map(|p| p.line()).unwrap_or(0),
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn weight_rows() -> Result<Vec<WeightRow>> {
    parse(OPTIMAL_WEIGHTS_CSV)
}

pub fn efficiency_rows(table: &str) -> Result<Vec<EfficiencyRow>> {
    let raw = match table {
        "gaussian" => EFFICIENCY_GAUSSIAN_CSV,
        "cauchy" => EFFICIENCY_CAUCHY_CSV,
        "student3" => EFFICIENCY_STUDENT3_CSV,
        other => {
            return Err(Error::OutOfRange {
                what: format!("unknown efficiency table '{other}'"),
            })
        }
    };
    parse(raw)
}

pub fn breakdown_rows() -> Result<Vec<BreakdownRow>> {
    parse(BREAKDOWN_CSV)
}

/// Reference per-cluster weights for (estimator, config, rho), in
/// cluster order.
pub fn reference_weights(estimator: &str, config: &str, rho: f64) -> Result<Vec<f64>> {
    let mut rows: Vec<WeightRow> = weight_rows()?
        .into_iter()
        .filter(|r| r.estimator == estimator && r.config == config)
        .collect();
    if rows.is_empty() {
        return Err(Error::OutOfRange {
            what: format!("no reference weights for {estimator} on {config}"),
        });
    }
    rows.sort_by_key(|r| r.cluster);
    Ok(rows
        .iter()
        .map(|r| if rho < 0.5 { r.w_rho_0_2 } else { r.w_rho_0_8 })
        .collect())
}

/// Cluster sizes for a reference configuration, taken from the weights
/// table (identical across estimators).
pub fn reference_sizes(config: &str) -> Result<Vec<usize>> {
    let mut rows: Vec<WeightRow> = weight_rows()?
        .into_iter()
        .filter(|r| r.estimator == "spatial_median" && r.config == config)
        .collect();
    if rows.is_empty() {
        return Err(Error::OutOfRange {
            what: format!("unknown configuration '{config}'"),
        });
    }
    rows.sort_by_key(|r| r.cluster);
    Ok(rows.iter().map(|r| r.m_i).collect())
}

/// Group-mean reference weight per cluster size.
pub fn reference_group_means(
    estimator: &str,
    config: &str,
    rho: f64,
) -> Result<BTreeMap<usize, f64>> {
    let weights = reference_weights(estimator, config, rho)?;
    let sizes = reference_sizes(config)?;
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (&m, &w) in sizes.iter().zip(&weights) {
        let entry = sums.entry(m).or_insert((0.0, 0));
        entry.0 += w;
        entry.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(m, (sum, count))| (m, sum / count as f64))
        .collect())
}

/// The estimator families covered by the reference tables.
pub fn family_by_label(label: &str) -> Option<EstimatorFamily> {
    match label {
        "mean" => Some(EstimatorFamily::Mean),
        "spatial_median" => Some(EstimatorFamily::SpatialMedian),
        "huber" => Some(EstimatorFamily::huber_default()),
        "lp_median_p3" => Some(EstimatorFamily::LpMedian { p: 3.0 }),
        _ => None,
    }
}
