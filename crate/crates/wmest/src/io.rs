//! CSV interchange formats.
//!
//! Samples: header `cluster_id,x1,...,xd`, one row per observation;
//! cluster ids are arbitrary integers, rows of one cluster need not be
//! contiguous. Weights: header `cluster_id,weight`. All numbers use the
//! period decimal separator and shortest round-trip formatting.

use std::collections::BTreeMap;
use std::io::{Read as _, Write as _};
use std::path::Path;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::model::{ClusteredSample, Matrix, Point, WeightScheme};

fn csv_error(line: u64, msg: impl Into<String>) -> Error {
    Error::Csv {
        line,
        msg: msg.into(),
    }
}

/// Reads a clustered sample; clusters are ordered by ascending id.
pub fn read_sample(path: &Path) -> Result<(ClusteredSample, Vec<i64>)> {
    let mut raw = String::new();
    std::fs::File::open(path)?.read_to_string(&mut raw)?;
    read_sample_str(&raw)
}

pub fn read_sample_str(raw: &str) -> Result<(ClusteredSample, Vec<i64>)> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(false)
        .from_reader(raw.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| csv_error(1, e.to_string()))?
        .clone();
    if headers.len() < 2 || headers.get(0) != Some("cluster_id") {
        return Err(csv_error(
            1,
            "expected header 'cluster_id,x1,...,xd'".to_string(),
        ));
    }
    let d = headers.len() - 1;
    let mut clusters: BTreeMap<i64, Vec<Point>> = BTreeMap::new();
    for (idx, record) in reader.records().enumerate() {
        let line = (idx + 2) as u64;
        let record = record.map_err(|e| csv_error(line, e.to_string()))?;
        let id: i64 = record
            .get(0)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| csv_error(line, "cluster_id is not an integer"))?;
        let mut coords = Vec::with_capacity(d);
        for j in 0..d {
            let field = record.get(j + 1).unwrap_or("").trim();
            let value: f64 = field
                .parse()
                .map_err(|_| csv_error(line, format!("coordinate {} is not a number", j + 1)))?;
            coords.push(value);
        }
        clusters
            .entry(id)
            .or_default()
            .push(DVector::from_row_slice(&coords));
    }
    let ids: Vec<i64> = clusters.keys().copied().collect();
    let sample = ClusteredSample::new(clusters.into_values().collect())?;
    Ok((sample, ids))
}

pub fn write_sample(path: &Path, sample: &ClusteredSample) -> Result<()> {
    let mut out = String::new();
    let d = sample.dim();
    out.push_str("cluster_id");
    for j in 1..=d {
        out.push_str(&format!(",x{j}"));
    }
    out.push('\n');
    for (i, cluster) in sample.clusters().iter().enumerate() {
        for point in cluster {
            out.push_str(&i.to_string());
            for v in point.iter() {
                out.push(',');
                out.push_str(&format_f64(*v));
            }
            out.push('\n');
        }
    }
    std::fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

/// Reads per-cluster weights keyed by cluster id; `ids` fixes the
/// cluster order of the corresponding sample.
pub fn read_weights(path: &Path, ids: &[i64]) -> Result<WeightScheme> {
    let mut raw = String::new();
    std::fs::File::open(path)?.read_to_string(&mut raw)?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(raw.as_bytes());
    let mut by_id: BTreeMap<i64, f64> = BTreeMap::new();
    for (idx, record) in reader.records().enumerate() {
        let line = (idx + 2) as u64;
        let record = record.map_err(|e| csv_error(line, e.to_string()))?;
        let id: i64 = record
            .get(0)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| csv_error(line, "cluster_id is not an integer"))?;
        let w: f64 = record
            .get(1)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| csv_error(line, "weight is not a number"))?;
        by_id.insert(id, w);
    }
    let weights: Vec<f64> = ids
        .iter()
        .map(|id| {
            by_id
                .get(id)
                .copied()
                .ok_or_else(|| csv_error(0, format!("no weight for cluster_id {id}")))
        })
        .collect::<Result<_>>()?;
    WeightScheme::per_cluster(weights)
}

/// Writes a weights file with columns cluster_id, m_i, w_i.
pub fn write_weights(path: &Path, sizes: &[usize], weights: &[f64]) -> Result<()> {
    let mut out = String::from("cluster_id,m_i,w_i\n");
    for (i, (&m, &w)) in sizes.iter().zip(weights).enumerate() {
        out.push_str(&format!("{i},{m},{}\n", format_f64(w)));
    }
    std::fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

pub fn write_point(path: &Path, point: &Point) -> Result<()> {
    let coords: Vec<String> = point.iter().map(|v| format_f64(*v)).collect();
    std::fs::File::create(path)?.write_all(format!("{}\n", coords.join(",")).as_bytes())?;
    Ok(())
}

/// Writes a covariance report as labelled row-major matrix blocks.
pub fn write_covariance(
    path: &Path,
    blocks: &[(&str, &Matrix)],
    condition_v: f64,
) -> Result<()> {
    let mut out = String::from("matrix,row,values\n");
    for (label, m) in blocks {
        for r in 0..m.nrows() {
            let row: Vec<String> = (0..m.ncols()).map(|c| format_f64(m[(r, c)])).collect();
            out.push_str(&format!("{label},{r},{}\n", row.join(",")));
        }
    }
    out.push_str(&format!("condition_v,0,{}\n", format_f64(condition_v)));
    std::fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

/// Shortest round-trip decimal formatting, locale independent.
pub fn format_f64(v: f64) -> String {
    let mut buffer = ryu_format(v);
    // trim a trailing ".0" for integers to keep files compact
    if buffer.ends_with(".0") {
        buffer.truncate(buffer.len() - 2);
    }
    buffer
}

fn ryu_format(v: f64) -> String {
    // {} on f64 is Rust's shortest round-trip formatting
    format!("{v}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn sample_round_trip() {
        let raw = "cluster_id,x1,x2\n0,1.5,2\n0,0.25,-1\n3,4,5\n";
        let (sample, ids) = read_sample_str(raw).unwrap();
        assert_eq!(sample.n_clusters(), 2);
        assert_eq!(sample.sizes(), vec![2, 1]);
        assert_eq!(ids, vec![0, 3]);

        let dir = tempdir().unwrap();
        let path = dir.path().join("sample.csv");
        write_sample(&path, &sample).unwrap();
        let (again, _) = read_sample(&path).unwrap();
        assert_eq!(sample, again);
    }

    #[test]
    fn malformed_sample_reports_line() {
        let raw = "cluster_id,x1,x2\n0,1.5,2\n0,abc,3\n";
        let err = read_sample_str(raw).unwrap_err();
        match err {
            Error::Csv { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn bad_header_rejected() {
        assert!(read_sample_str("id,x1\n0,1\n").is_err());
    }

    #[test]
    fn weights_keyed_by_cluster_id() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("weights.csv");
        std::fs::write(&path, "cluster_id,weight\n3,0.5\n0,1.5\n").unwrap();
        let w = read_weights(&path, &[0, 3]).unwrap();
        match w {
            WeightScheme::PerCluster(values) => assert_eq!(values, vec![1.5, 0.5]),
            _ => panic!("expected per-cluster weights"),
        }
    }

    #[test]
    fn missing_weight_is_an_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("weights.csv");
        std::fs::write(&path, "cluster_id,weight\n0,1.0\n").unwrap();
        assert!(read_weights(&path, &[0, 1]).is_err());
    }

    #[test]
    fn float_formatting_round_trips() {
        for v in [0.1, 1.0 / 3.0, 1e-12, 123456.789, -0.25] {
            let s = format_f64(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
            assert!(!s.contains(','));
        }
        assert_eq!(format_f64(2.0), "2");
    }
}
