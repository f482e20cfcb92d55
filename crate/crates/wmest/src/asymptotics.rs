//! Plug-in estimation of the asymptotic covariance of weighted
//! M-estimators for clustered data.
//!
//! The sandwich has bread `V_hat` (weighted mean score derivative) and
//! meat `B_hat + C_hat`, where `B_hat` collects same-observation score
//! outer products and `C_hat` the within-cluster cross pairs. These three
//! estimators are defined for per-cluster weight schemes only.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{ClusteredSample, EstimatorFamily, Matrix, Point, WeightScheme};

/// Condition-number ceiling above which the bread is treated as singular.
pub const MAX_BREAD_CONDITION: f64 = 1e12;

#[derive(Debug, Clone)]
pub struct CovarianceReport {
    pub b_hat: Matrix,
    pub c_hat: Matrix,
    pub v_hat: Matrix,
    pub sigma_hat: Matrix,
    pub eval_point: Point,
    pub condition_v: f64,
}

/// Finite-sample values of the weight-sequence functionals appearing in
/// the convergence and normality conditions.
#[derive(Debug, Clone, Copy)]
pub struct AssumptionDiagnostics {
    /// (1/N_n) sum of all observation weights; 1 for a normalized scheme.
    pub weight_mean: f64,
    /// (1/N_n) sum of squared observation weights (the c_w functional).
    pub c_w_finite: f64,
    /// Partial sum over clusters of (cluster weight total)^2 / i^2.
    pub kolmogorov_partial: f64,
    /// (1/N_n) sum over clusters of (cluster weight total)^(2+eta).
    pub lindeberg_sum: f64,
}

/// Same-observation meat term:
/// (1/N_n) sum_i w_i^2 sum_j psi psi^T, symmetric PSD.
pub fn b_hat(
    sample: &ClusteredSample,
    weights: &WeightScheme,
    family: &EstimatorFamily,
    a: &Point,
) -> Result<Matrix> {
    let w = weights.cluster_values("b_hat")?;
    check_weight_count(sample, w)?;
    let d = sample.dim();
    let mut acc = DMatrix::zeros(d, d);
    for (cluster, &wi) in sample.clusters().iter().zip(w) {
        let wi2 = wi * wi;
        for x in cluster {
            let psi = family.psi(x, a)?;
            acc += &psi * psi.transpose() * wi2;
        }
    }
    Ok(acc / sample.n_total() as f64)
}

/// Cross-pair meat term over ordered pairs j' != j within each cluster,
/// symmetrized as (M + M^T)/2.
pub fn c_hat(
    sample: &ClusteredSample,
    weights: &WeightScheme,
    family: &EstimatorFamily,
    a: &Point,
) -> Result<Matrix> {
    let w = weights.cluster_values("c_hat")?;
    check_weight_count(sample, w)?;
    let d = sample.dim();
    let mut acc = DMatrix::zeros(d, d);
    for (cluster, &wi) in sample.clusters().iter().zip(w) {
        let wi2 = wi * wi;
        let scores: Vec<Point> = cluster
            .iter()
            .map(|x| family.psi(x, a))
            .collect::<Result<_>>()?;
        // sum over ordered cross pairs = (sum psi)(sum psi)^T - sum psi psi^T
        let mut total = nalgebra::DVector::zeros(d);
        for s in &scores {
            total += s;
        }
        let mut cross = &total * total.transpose();
        for s in &scores {
            cross -= s * s.transpose();
        }
        acc += cross * wi2;
    }
    acc /= sample.n_total() as f64;
    Ok((&acc + acc.transpose()) / 2.0)
}

/// Bread: weighted average of the score derivative over all observations.
pub fn v_hat(
    sample: &ClusteredSample,
    weights: &WeightScheme,
    family: &EstimatorFamily,
    a: &Point,
) -> Result<Matrix> {
    let w = weights.cluster_values("v_hat")?;
    check_weight_count(sample, w)?;
    let d = sample.dim();
    let mut acc = DMatrix::zeros(d, d);
    for (cluster, &wi) in sample.clusters().iter().zip(w) {
        for x in cluster {
            let (jac, boundary) = family.psi_jacobian_flagged(x, a)?;
            // an observation tied with the evaluation point has an
            // unbounded spatial-median score derivative
            if boundary && matches!(family, EstimatorFamily::SpatialMedian) {
                return Err(Error::SingularBread {
                    family: family.name(),
                    point: a.iter().copied().collect(),
                    condition: f64::INFINITY,
                });
            }
            acc += jac * wi;
        }
    }
    Ok(acc / sample.n_total() as f64)
}

fn check_weight_count(sample: &ClusteredSample, w: &[f64]) -> Result<()> {
    if w.len() != sample.n_clusters() {
        return Err(Error::WeightCountMismatch {
            expected: sample.n_clusters(),
            got: w.len(),
        });
    }
    for (index, &value) in w.iter().enumerate() {
        if !(value > 0.0) {
            return Err(Error::NonPositiveWeight { index, value });
        }
    }
    Ok(())
}

/// Condition number of a square matrix from its singular values.
pub fn condition_number(m: &Matrix) -> f64 {
    let svd = m.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin > 0.0 {
        smax / smin
    } else {
        f64::INFINITY
    }
}

/// Assembles V^-1 (B + C) V^-1 from its three components, symmetrized.
pub fn assemble_sandwich(b: &Matrix, c: &Matrix, v: &Matrix) -> Result<Matrix> {
    let condition_v = condition_number(v);
    if !condition_v.is_finite() || condition_v >= MAX_BREAD_CONDITION {
        return Err(Error::SingularBread {
            family: "assembled sandwich".into(),
            point: vec![],
            condition: condition_v,
        });
    }
    let v_inv = v.clone().try_inverse().ok_or_else(|| Error::SingularBread {
        family: "assembled sandwich".into(),
        point: vec![],
        condition: condition_v,
    })?;
    let sigma = &v_inv * (b + c) * v_inv.transpose();
    Ok((&sigma + sigma.transpose()) / 2.0)
}

/// Assembles the sandwich V^-1 (B + C) V^-1 at evaluation point `a`.
pub fn sigma_hat(
    sample: &ClusteredSample,
    weights: &WeightScheme,
    family: &EstimatorFamily,
    a: &Point,
) -> Result<CovarianceReport> {
    let b = b_hat(sample, weights, family, a)?;
    let c = c_hat(sample, weights, family, a)?;
    let v = v_hat(sample, weights, family, a)?;
    let condition_v = condition_number(&v);
    if !condition_v.is_finite() || condition_v >= MAX_BREAD_CONDITION {
        return Err(Error::SingularBread {
            family: family.name(),
            point: a.iter().copied().collect(),
            condition: condition_v,
        });
    }
    let v_inv = v.clone().try_inverse().ok_or_else(|| Error::SingularBread {
        family: family.name(),
        point: a.iter().copied().collect(),
        condition: condition_v,
    })?;
    let meat = &b + &c;
    let sigma = &v_inv * meat * v_inv.transpose();
    let sigma = (&sigma + sigma.transpose()) / 2.0;
    Ok(CovarianceReport {
        b_hat: b,
        c_hat: c,
        v_hat: v,
        sigma_hat: sigma,
        eval_point: a.clone(),
        condition_v,
    })
}

/// d-th root of the determinant ratio of the two covariance estimates;
/// values above one favor the weighted estimator.
pub fn relative_efficiency(
    report_unweighted: &CovarianceReport,
    report_weighted: &CovarianceReport,
) -> Result<f64> {
    efficiency_from_dets(
        report_unweighted.sigma_hat.determinant(),
        report_weighted.sigma_hat.determinant(),
        report_unweighted.sigma_hat.nrows(),
    )
}

/// (det_reference / det_candidate)^(1/d) with positivity checks.
pub fn efficiency_from_dets(det_reference: f64, det_candidate: f64, d: usize) -> Result<f64> {
    if !(det_reference > 0.0) {
        return Err(Error::NonPositiveDeterminant {
            value: det_reference,
        });
    }
    if !(det_candidate > 0.0) {
        return Err(Error::NonPositiveDeterminant {
            value: det_candidate,
        });
    }
    Ok((det_reference / det_candidate).powf(1.0 / d as f64))
}

/// Finite-n weight functionals for the convergence assumptions.
pub fn assumption_diagnostics(
    weights: &WeightScheme,
    sample: &ClusteredSample,
    eta: f64,
) -> Result<AssumptionDiagnostics> {
    if !(eta > 0.0) {
        return Err(Error::OutOfRange {
            what: format!("eta must be positive, got {eta}"),
        });
    }
    let expanded = weights.expanded(sample)?;
    let n_total = sample.n_total() as f64;
    let mut sum_w = 0.0;
    let mut sum_w2 = 0.0;
    let mut kolmogorov_partial = 0.0;
    let mut lindeberg_sum = 0.0;
    for (i, wi) in expanded.iter().enumerate() {
        let cluster_total: f64 = wi.iter().sum();
        sum_w += cluster_total;
        sum_w2 += wi.iter().map(|w| w * w).sum::<f64>();
        kolmogorov_partial += cluster_total * cluster_total / ((i + 1) * (i + 1)) as f64;
        lindeberg_sum += cluster_total.powf(2.0 + eta);
    }
    Ok(AssumptionDiagnostics {
        weight_mean: sum_w / n_total,
        c_w_finite: sum_w2 / n_total,
        kolmogorov_partial,
        lindeberg_sum: lindeberg_sum / n_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    fn pt(coords: &[f64]) -> Point {
        DVector::from_row_slice(coords)
    }

    #[test]
    fn b_hat_single_cluster_single_point() {
        // one cluster {x}, w=2, mean family: psi = a - x, B = 4 v v^T
        let s = ClusteredSample::new(vec![vec![pt(&[1.0, 0.0])]]).unwrap();
        let w = WeightScheme::per_cluster(vec![2.0]).unwrap();
        let a = pt(&[0.0, 2.0]);
        let v = &a - pt(&[1.0, 0.0]);
        let b = b_hat(&s, &w, &EstimatorFamily::Mean, &a).unwrap();
        let expect = &v * v.transpose() * 4.0;
        assert!((b - expect).abs().max() < 1e-12);
    }

    #[test]
    fn b_hat_two_point_cluster_hand_sum() {
        // Mean, cluster {(1,0),(0,1)}, w=1, a=(0,0): psi = (-1,0),(0,-1)
        let s = ClusteredSample::new(vec![vec![pt(&[1.0, 0.0]), pt(&[0.0, 1.0])]]).unwrap();
        let w = WeightScheme::unweighted(1);
        let b = b_hat(&s, &w, &EstimatorFamily::Mean, &pt(&[0.0, 0.0])).unwrap();
        assert_relative_eq!(b[(0, 0)], 0.5);
        assert_relative_eq!(b[(1, 1)], 0.5);
        assert_relative_eq!(b[(0, 1)], 0.0);
    }

    #[test]
    fn b_and_c_quadratic_in_weights_v_linear() {
        let s = ClusteredSample::new(vec![
            vec![pt(&[1.0, 0.3]), pt(&[0.0, 1.0]), pt(&[0.4, -1.0])],
            vec![pt(&[2.0, 2.0]), pt(&[1.5, 0.5])],
        ])
        .unwrap();
        let a = pt(&[0.2, 0.1]);
        let fam = EstimatorFamily::huber_default();
        let w1 = WeightScheme::per_cluster(vec![1.0, 1.0]).unwrap();
        let w2 = WeightScheme::per_cluster(vec![0.5, 0.5]).unwrap();
        let (b1, b2) = (b_hat(&s, &w1, &fam, &a).unwrap(), b_hat(&s, &w2, &fam, &a).unwrap());
        assert!((b2 - b1 * 0.25).abs().max() < 1e-12);
        let (c1, c2) = (c_hat(&s, &w1, &fam, &a).unwrap(), c_hat(&s, &w2, &fam, &a).unwrap());
        assert!((c2 - c1 * 0.25).abs().max() < 1e-12);
        let (v1, v2) = (v_hat(&s, &w1, &fam, &a).unwrap(), v_hat(&s, &w2, &fam, &a).unwrap());
        assert!((v2 - v1 * 0.5).abs().max() < 1e-12);
    }

    #[test]
    fn c_hat_zero_for_singleton_clusters() {
        let s = ClusteredSample::from_singletons(vec![pt(&[1.0, 2.0]), pt(&[0.0, -1.0])]).unwrap();
        let w = WeightScheme::unweighted(2);
        let c = c_hat(&s, &w, &EstimatorFamily::Mean, &pt(&[0.3, 0.3])).unwrap();
        assert_eq!(c.abs().max(), 0.0);
    }

    #[test]
    fn c_hat_two_point_cluster_hand_sum() {
        // scores u, v: ordered cross pairs give u v^T + v u^T, / N_n = 2
        let s = ClusteredSample::new(vec![vec![pt(&[1.0, 0.0]), pt(&[0.0, 1.0])]]).unwrap();
        let w = WeightScheme::unweighted(1);
        let a = pt(&[0.0, 0.0]);
        let fam = EstimatorFamily::Mean;
        let u = fam.psi(&pt(&[1.0, 0.0]), &a).unwrap();
        let v = fam.psi(&pt(&[0.0, 1.0]), &a).unwrap();
        let expect = (&u * v.transpose() + &v * u.transpose()) / 2.0;
        let c = c_hat(&s, &w, &fam, &a).unwrap();
        assert!((c - expect).abs().max() < 1e-12);
    }

    #[test]
    fn v_hat_identity_for_mean_with_normalized_weights() {
        let s = ClusteredSample::new(vec![
            vec![pt(&[1.0, 0.0]); 3],
            vec![pt(&[0.0, 1.0]); 7],
        ])
        .unwrap();
        let w = WeightScheme::per_cluster(vec![2.0, 0.4])
            .unwrap()
            .normalized(&s)
            .unwrap();
        let v = v_hat(&s, &w, &EstimatorFamily::Mean, &pt(&[0.0, 0.0])).unwrap();
        assert!((v - Matrix::identity(2, 2)).abs().max() < 1e-12);
    }

    #[test]
    fn v_hat_spatial_median_closed_form() {
        let s = ClusteredSample::new(vec![vec![pt(&[0.0, 0.0])]]).unwrap();
        let w = WeightScheme::unweighted(1);
        let v = v_hat(&s, &w, &EstimatorFamily::SpatialMedian, &pt(&[2.0, 0.0])).unwrap();
        assert_relative_eq!(v[(0, 0)], 0.0);
        assert_relative_eq!(v[(1, 1)], 0.5);
    }

    #[test]
    fn sigma_collapses_to_b_in_iid_mean_case() {
        let s = ClusteredSample::from_singletons(vec![
            pt(&[1.0, 0.2]),
            pt(&[-0.4, 1.0]),
            pt(&[0.3, -0.8]),
        ])
        .unwrap();
        let w = WeightScheme::unweighted(3);
        let a = pt(&[0.1, 0.0]);
        let report = sigma_hat(&s, &w, &EstimatorFamily::Mean, &a).unwrap();
        assert!((&report.sigma_hat - &report.b_hat).abs().max() < 1e-12);
        assert!(report.c_hat.abs().max() == 0.0);
    }

    #[test]
    fn sigma_one_dimensional_hand_arithmetic() {
        // d=1, mean, singleton clusters {0},{2}, a=1: psi = +-1, B=1, C=0, V=1
        let s = ClusteredSample::from_singletons(vec![pt(&[0.0]), pt(&[2.0])]).unwrap();
        let w = WeightScheme::unweighted(2);
        let report = sigma_hat(&s, &w, &EstimatorFamily::Mean, &pt(&[1.0])).unwrap();
        assert_relative_eq!(report.b_hat[(0, 0)], 1.0);
        assert_relative_eq!(report.c_hat[(0, 0)], 0.0);
        assert_relative_eq!(report.v_hat[(0, 0)], 1.0);
        assert_relative_eq!(report.sigma_hat[(0, 0)], 1.0);
    }

    #[test]
    fn sandwich_identity_and_symmetry() {
        let s = ClusteredSample::new(vec![
            vec![pt(&[1.0, 0.3]), pt(&[0.0, 1.0]), pt(&[0.4, -1.0])],
            vec![pt(&[2.0, 2.0]), pt(&[1.5, 0.5])],
        ])
        .unwrap();
        let w = WeightScheme::per_cluster(vec![1.3, 0.8]).unwrap();
        let a = pt(&[0.4, 0.2]);
        let fam = EstimatorFamily::huber_default();
        let report = sigma_hat(&s, &w, &fam, &a).unwrap();
        let v_inv = report.v_hat.clone().try_inverse().unwrap();
        let rebuilt = &v_inv * (&report.b_hat + &report.c_hat) * v_inv.transpose();
        assert!((&report.sigma_hat - rebuilt).abs().max() < 1e-10);
        assert!((&report.sigma_hat - report.sigma_hat.transpose()).abs().max() < 1e-10);
    }

    #[test]
    fn unweighted_meat_equals_cluster_sum_outer_products() {
        // With w == 1, B + C must match the independently computed
        // (1/N_n) sum_i (sum_j psi)(sum_j psi)^T.
        let s = ClusteredSample::new(vec![
            vec![pt(&[1.0, 0.3]), pt(&[0.0, 1.0])],
            vec![pt(&[2.0, 2.0]), pt(&[1.5, 0.5]), pt(&[-1.0, 0.2])],
        ])
        .unwrap();
        let w = WeightScheme::unweighted(2);
        let a = pt(&[0.4, 0.2]);
        let fam = EstimatorFamily::SpatialMedian;
        let meat = b_hat(&s, &w, &fam, &a).unwrap() + c_hat(&s, &w, &fam, &a).unwrap();
        let mut oracle = DMatrix::zeros(2, 2);
        for cluster in s.clusters() {
            let mut total = DVector::zeros(2);
            for x in cluster {
                total += fam.psi(x, &a).unwrap();
            }
            oracle += &total * total.transpose();
        }
        oracle /= s.n_total() as f64;
        assert!((meat - oracle).abs().max() < 1e-10);
    }

    #[test]
    fn singular_bread_is_reported() {
        // All observations identical: spatial-median bread is zero.
        let s = ClusteredSample::from_singletons(vec![pt(&[1.0, 1.0]); 3]).unwrap();
        let w = WeightScheme::unweighted(3);
        let err = sigma_hat(&s, &w, &EstimatorFamily::SpatialMedian, &pt(&[1.0, 1.0]))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("spatial_median"), "{msg}");
    }

    #[test]
    fn relative_efficiency_identity_and_root() {
        let s = ClusteredSample::from_singletons(vec![
            pt(&[1.0, 0.2]),
            pt(&[-0.4, 1.0]),
            pt(&[0.3, -0.8]),
        ])
        .unwrap();
        let w = WeightScheme::unweighted(3);
        let report = sigma_hat(&s, &w, &EstimatorFamily::Mean, &pt(&[0.0, 0.0])).unwrap();
        assert_relative_eq!(relative_efficiency(&report, &report).unwrap(), 1.0);
        assert_relative_eq!(efficiency_from_dets(4.0, 1.0, 2).unwrap(), 2.0);
        assert!(efficiency_from_dets(-1.0, 1.0, 2).is_err());
    }

    #[test]
    fn per_observation_weights_rejected_for_meat() {
        let s = ClusteredSample::new(vec![vec![pt(&[0.0]), pt(&[1.0])]]).unwrap();
        let w = WeightScheme::PerObservation(vec![vec![1.0, 1.0]]);
        assert!(b_hat(&s, &w, &EstimatorFamily::Mean, &pt(&[0.5])).is_err());
    }

    #[test]
    fn diagnostics_unweighted_case() {
        let s = ClusteredSample::new(vec![vec![pt(&[0.0]); 4], vec![pt(&[1.0]); 6]]).unwrap();
        let w = WeightScheme::unweighted(2);
        let diag = assumption_diagnostics(&w, &s, 1.0).unwrap();
        assert_relative_eq!(diag.weight_mean, 1.0);
        assert_relative_eq!(diag.c_w_finite, 1.0);
        // clusters totals 4 and 6: 16/1 + 36/4 = 25
        assert_relative_eq!(diag.kolmogorov_partial, 25.0);
        // (4^3 + 6^3)/10 = 28
        assert_relative_eq!(diag.lindeberg_sum, 28.0);
    }

    #[test]
    fn diagnostics_hand_summed_c_w() {
        // m=(2,8), w=(2.1429, 0.7143): c_w = (1/10)(2 w1^2 + 8 w2^2)
        let s = ClusteredSample::new(vec![vec![pt(&[0.0]); 2], vec![pt(&[0.0]); 8]]).unwrap();
        let w = WeightScheme::per_cluster(vec![2.1429, 0.7143]).unwrap();
        let diag = assumption_diagnostics(&w, &s, 1.0).unwrap();
        assert_relative_eq!(diag.c_w_finite, 1.3265841, epsilon = 1e-4);
        // Cauchy-Schwarz: c_w >= weight_mean^2
        assert!(diag.c_w_finite >= diag.weight_mean * diag.weight_mean - 1e-12);
    }
}
