//! Property-based invariants of the estimation pipeline.

use nalgebra::DVector;
use proptest::prelude::*;

use wmest::asymptotics::{efficiency_from_dets, sigma_hat};
use wmest::breakdown::breakdown_exact;
use wmest::model::{objective, ClusteredSample, EstimatorFamily, Point, WeightScheme};
use wmest::simulation::{
    generate_sample, ClusterConfiguration, DistributionFamily, DistributionSpec,
};
use wmest::solver::{solve, SolveOptions};

fn coord() -> impl Strategy<Value = f64> {
    (-5.0..5.0f64).prop_map(|v| (v * 1e6).round() / 1e6)
}

fn cluster() -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec((coord(), coord()), 1..5)
        .prop_map(|points| points.into_iter().map(|(a, b)| DVector::from_row_slice(&[a, b])).collect())
}

fn sample() -> impl Strategy<Value = ClusteredSample> {
    prop::collection::vec(cluster(), 2..5)
        .prop_map(|clusters| ClusteredSample::new(clusters).unwrap())
}

fn weights(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.1..4.0f64, n)
}

fn family() -> impl Strategy<Value = EstimatorFamily> {
    prop_oneof![
        Just(EstimatorFamily::Mean),
        Just(EstimatorFamily::SpatialMedian),
        (0.5..2.5f64).prop_map(|k| EstimatorFamily::Huber { k }),
        (2.1..5.0f64).prop_map(|p| EstimatorFamily::LpMedian { p }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn converged_solutions_are_local_minima(
        s in sample(),
        fam in family(),
        raw in weights(4),
        seed in 0u64..1000,
    ) {
        let w = WeightScheme::per_cluster(raw[..s.n_clusters()].to_vec()).unwrap();
        let fit = solve(&s, &w, &fam, &SolveOptions::default()).unwrap();
        prop_assume!(fit.converged);
        let base = objective(&s, &w.normalized(&s).unwrap(), &fam, &fit.theta_hat).unwrap();
        let mut rng_state = seed;
        for _ in 0..6 {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            let angle = (rng_state >> 32) as f64 / u32::MAX as f64 * std::f64::consts::TAU;
            let delta = DVector::from_row_slice(&[angle.cos(), angle.sin()]) * 1e-4;
            let probe = objective(
                &s,
                &w.normalized(&s).unwrap(),
                &fam,
                &(&fit.theta_hat + delta),
            )
            .unwrap();
            prop_assert!(probe >= base - 1e-7, "probe {probe} < base {base}");
        }
    }

    #[test]
    fn scaling_weights_leaves_the_estimate_unchanged(
        s in sample(),
        fam in family(),
        raw in weights(4),
        scale in 0.1..10.0f64,
    ) {
        let n = s.n_clusters();
        let w1 = WeightScheme::per_cluster(raw[..n].to_vec()).unwrap();
        let w2 = WeightScheme::per_cluster(raw[..n].iter().map(|v| v * scale).collect()).unwrap();
        let a = solve(&s, &w1, &fam, &SolveOptions::default()).unwrap();
        let b = solve(&s, &w2, &fam, &SolveOptions::default()).unwrap();
        // normalization makes w/mean(w) and (s*w)/mean(s*w) equal only up
        // to rounding; a flat objective can turn that last ulp into a few
        // nanometres of drift in the minimizer
        prop_assert!((a.theta_hat - b.theta_hat).norm() < 1e-6);
    }

    #[test]
    fn translation_equivariance(
        s in sample(),
        fam in family(),
        raw in weights(4),
        dx in -50.0..50.0f64,
        dy in -50.0..50.0f64,
    ) {
        let n = s.n_clusters();
        let w = WeightScheme::per_cluster(raw[..n].to_vec()).unwrap();
        let shift = DVector::from_row_slice(&[dx, dy]);
        let a = solve(&s, &w, &fam, &SolveOptions::default()).unwrap();
        let b = solve(&s.translated(&shift), &w, &fam, &SolveOptions::default()).unwrap();
        prop_assume!(a.converged && b.converged);
        prop_assert!((&a.theta_hat + &shift - b.theta_hat).norm() < 1e-6);
    }

    #[test]
    fn sandwich_is_symmetric_psd(
        s in sample(),
        fam in family(),
        raw in weights(4),
    ) {
        let n = s.n_clusters();
        let w = WeightScheme::per_cluster(raw[..n].to_vec()).unwrap();
        let a = DVector::from_row_slice(&[0.05, -0.05]);
        if let Ok(report) = sigma_hat(&s, &w, &fam, &a) {
            prop_assert!(
                (&report.sigma_hat - report.sigma_hat.transpose()).abs().max() < 1e-10
            );
            let eig = report.sigma_hat.clone().symmetric_eigen();
            prop_assert!(eig.eigenvalues.min() >= -1e-9);
        }
    }

    #[test]
    fn breakdown_count_monotone_in_epsilon(
        raw in prop::collection::vec(0.1..3.0f64, 2..20),
        e1 in 0.05..0.95f64,
        e2 in 0.05..0.95f64,
    ) {
        let n = raw.len() as f64;
        let total: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|v| v * n / total).collect();
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        let a = breakdown_exact(&w, lo).unwrap();
        let b = breakdown_exact(&w, hi).unwrap();
        prop_assert!(a.k_star <= b.k_star);
        prop_assert!(a.k_star >= 1 && b.k_star <= w.len());
    }

    #[test]
    fn efficiency_reciprocal_symmetry(
        det_a in 0.01..100.0f64,
        det_b in 0.01..100.0f64,
        d in 1usize..4,
    ) {
        let ab = efficiency_from_dets(det_a, det_b, d).unwrap();
        let ba = efficiency_from_dets(det_b, det_a, d).unwrap();
        prop_assert!((ab * ba - 1.0).abs() < 1e-10);
    }
}

#[test]
fn plug_in_covariance_consistent_at_estimate() {
    // evaluating the sandwich at theta_hat instead of the true location
    // changes it by little once the sample is large
    let cfg = ClusterConfiguration {
        name: "large".into(),
        sizes: vec![10; 1000],
    };
    let dist = DistributionSpec::new(DistributionFamily::Gaussian, 0.3, 2).unwrap();
    let s = generate_sample(&cfg, &dist, 17).unwrap();
    let w = WeightScheme::unweighted(1000);
    for fam in [
        EstimatorFamily::Mean,
        EstimatorFamily::SpatialMedian,
        EstimatorFamily::huber_default(),
    ] {
        let fit = solve(&s, &w, &fam, &SolveOptions::default()).unwrap();
        assert!(
            fit.converged,
            "{}: {} iterations, gradient {:.3e}",
            fam.name(),
            fit.iterations,
            fit.final_gradient_norm
        );
        let at_hat = sigma_hat(&s, &w, &fam, &fit.theta_hat).unwrap();
        let at_true = sigma_hat(&s, &w, &fam, &dist.theta_point()).unwrap();
        let scale = at_true.sigma_hat.abs().max();
        let dev = (&at_hat.sigma_hat - &at_true.sigma_hat).abs().max() / scale;
        assert!(dev <= 0.05, "{}: deviation {dev}", fam.name());
    }
}
