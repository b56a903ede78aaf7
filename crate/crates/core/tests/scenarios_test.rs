use approx::assert_relative_eq;
use nalgebra::DMatrix;

use ltv_watermark::model::KAPPA_TOL;
use ltv_watermark::normalization::NormalizationTables;
use ltv_watermark::scenarios::{
    by_name, example1_bundle, example1_system, experiment_protocol, vehicle_default,
    vehicle_scenario, ReferencePath, VehicleNoise,
};

#[test]
fn benchmark_matrices_match_their_definitions() {
    let sys = example1_system(300).unwrap();
    assert_eq!((sys.p, sys.q, sys.r), (3, 1, 2));
    assert_relative_eq!(sys.dt, 1.0);
    assert_relative_eq!(sys.a[0][(0, 1)], 1.0, epsilon = 1e-15);
    assert_relative_eq!(sys.a[250][(0, 1)], 1.0 + 0.5 * (2.5f64).sin(), epsilon = 1e-15);
    assert_relative_eq!(
        sys.b[0].clone(),
        DMatrix::from_row_slice(3, 1, &[0.0, 0.0, 1.0]),
        epsilon = 1e-15
    );
    assert_relative_eq!(
        sys.k[0].clone(),
        DMatrix::from_row_slice(1, 3, &[-4.0e-4, -3.65e-2, -1.05e-1]),
        epsilon = 1e-15
    );
    assert_relative_eq!(sys.l[0][(0, 1)], -1.0, epsilon = 1e-15);
    assert_relative_eq!(sys.sigma_w[0][(0, 0)], 1e-3, epsilon = 1e-18);
    assert_relative_eq!(sys.sigma_z[0][(1, 1)], 1e-3, epsilon = 1e-18);
    assert_relative_eq!(sys.sigma_e[(0, 0)], 1e-3, epsilon = 1e-18);
    assert!(sys.validate().unwrap().is_clean());

    let bundle = example1_bundle(300).unwrap();
    assert_eq!(bundle.labels.len(), 3);
    assert!(bundle.reference.is_none());
}

#[test]
fn straight_paths_have_zero_curvature() {
    let path = ReferencePath {
        waypoints: (0..50).map(|i| [i as f64, 0.0]).collect(),
        speed_profile: vec![5.0; 50],
        dt: 0.1,
    };
    let arcs = path.arc_lengths();
    assert_relative_eq!(arcs[49], 49.0, epsilon = 1e-12);
    assert!(path.curvatures().iter().all(|&k| k.abs() < 1e-12));

    let samples = path.sample(40).unwrap();
    assert!(samples.iter().all(|s| (s.speed - 5.0).abs() < 1e-12));
    assert!(samples.iter().all(|s| s.curvature.abs() < 1e-12));
}

#[test]
fn circular_paths_recover_their_radius() {
    let radius = 25.0;
    let count = 200;
    let path = ReferencePath {
        waypoints: (0..count)
            .map(|i| {
                let th = i as f64 * 0.02;
                [radius * th.cos(), radius * th.sin()]
            })
            .collect(),
        speed_profile: vec![8.0; count],
        dt: 0.05,
    };
    for k in path.curvatures() {
        assert_relative_eq!(k, 1.0 / radius, max_relative = 1e-3);
    }
}

#[test]
fn sampling_holds_the_last_values_past_the_path_end() {
    let path = ReferencePath {
        waypoints: (0..10).map(|i| [i as f64, 0.0]).collect(),
        speed_profile: (0..10).map(|i| 1.0 + i as f64).collect(),
        dt: 1.0,
    };
    // The path is 9 m long and is exhausted within a few steps.
    let samples = path.sample(20).unwrap();
    assert_relative_eq!(samples[0].speed, 1.0, epsilon = 1e-12);
    assert_relative_eq!(samples[19].speed, 10.0, epsilon = 1e-12);
}

#[test]
fn degenerate_paths_are_rejected() {
    let two_points = ReferencePath {
        waypoints: vec![[0.0, 0.0], [1.0, 0.0]],
        speed_profile: vec![1.0, 1.0],
        dt: 0.1,
    };
    assert!(two_points.sample(5).is_err());

    let stopped = ReferencePath {
        waypoints: vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]],
        speed_profile: vec![1.0, 0.0, 1.0],
        dt: 0.1,
    };
    assert!(stopped.sample(5).is_err());

    let ragged = ReferencePath {
        waypoints: vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]],
        speed_profile: vec![1.0, 1.0],
        dt: 0.1,
    };
    assert!(ragged.sample(5).is_err());
}

#[test]
fn s_curve_spans_the_designed_speed_band() {
    let path = ReferencePath::s_curve(600.0, 1.0, 0.05);
    let samples = path.sample(1000).unwrap();
    let vmin = samples.iter().map(|s| s.speed).fold(f64::INFINITY, f64::min);
    let vmax = samples.iter().map(|s| s.speed).fold(0.0f64, f64::max);
    assert!(vmin >= 5.9 && vmin < 7.0, "vmin {vmin}");
    assert!(vmax > 13.0 && vmax <= 14.1, "vmax {vmax}");
    let kmax = samples.iter().map(|s| s.curvature.abs()).fold(0.0f64, f64::max);
    assert!(kmax > 0.015 && kmax <= 0.021, "kmax {kmax}");
}

#[test]
fn vehicle_scenario_is_stable_and_watermark_visible() {
    let bundle = vehicle_default(1000).unwrap();
    let sys = &bundle.sys;
    assert_eq!((sys.p, sys.q, sys.r), (3, 2, 3));
    assert_relative_eq!(sys.dt, 0.05);
    let report = sys.validate().unwrap();
    assert!(report.is_clean());
    assert!(report.max_norm_abar < 0.9, "rho abar {}", report.max_norm_abar);
    assert!(report.max_norm_aunderline < 0.5, "rho aund {}", report.max_norm_aunderline);

    // Both inputs reach the measurements in one step.
    assert_eq!(sys.compute_kappa(1000, KAPPA_TOL, None).unwrap(), 1);
    assert_eq!(bundle.labels.len(), 3);
    assert!(bundle.reference.is_some());
}

#[test]
fn vehicle_gains_track_the_reference_speed() {
    let bundle = vehicle_default(1000).unwrap();
    let sys = &bundle.sys;
    // The lateral dynamics entry A[0][1] is dt times the reference speed.
    let samples = bundle.reference.as_ref().unwrap().sample(1000).unwrap();
    for n in [0, 250, 500, 750] {
        assert_relative_eq!(sys.a[n][(0, 1)], 0.05 * samples[n].speed, epsilon = 1e-12);
        assert_relative_eq!(sys.b[n][(1, 0)], 0.05 * samples[n].speed / 2.7, epsilon = 1e-12);
    }
    // Gains vary along the horizon with the operating point.
    assert_ne!(sys.k[100], sys.k[600]);
    assert_ne!(sys.l[100], sys.l[600]);
}

#[test]
fn vehicle_observer_leaves_residuals_nearly_white() {
    // Kalman-style observer gains give whitened residuals with negligible
    // lagged correlation, so the analytic window correlation is close to
    // the identity.
    let bundle = vehicle_default(300).unwrap();
    let tables = NormalizationTables::analytic(&bundle.sys, 299, 20, 1).unwrap();
    for n in [25, 150, 299] {
        let g = tables.g_matrix(n).unwrap();
        let mut max_off = 0.0f64;
        for a in 0..20 {
            for b in 0..20 {
                if a != b {
                    max_off = max_off.max(g[(a, b)].abs());
                }
            }
        }
        assert!(max_off < 1e-3, "off-diagonal correlation {max_off} at window end {n}");
    }
}

#[test]
fn vehicle_noise_configuration_is_respected() {
    let path = ReferencePath::s_curve(600.0, 1.0, 0.05);
    let noise = VehicleNoise {
        sigma_w: 2e-4,
        sigma_z: 3e-4,
        sigma_e_steer: 1e-2,
        sigma_e_accel: 4e-3,
    };
    let bundle = vehicle_scenario(&path, 200, &noise).unwrap();
    assert_relative_eq!(bundle.sys.sigma_w[0][(0, 0)], 2e-4, epsilon = 1e-18);
    assert_relative_eq!(bundle.sys.sigma_z[0][(2, 2)], 3e-4, epsilon = 1e-18);
    assert_relative_eq!(bundle.sys.sigma_e[(0, 0)], 1e-2, epsilon = 1e-18);
    assert_relative_eq!(bundle.sys.sigma_e[(1, 1)], 4e-3, epsilon = 1e-18);
}

#[test]
fn scenarios_resolve_by_name() {
    assert!(by_name("example1", 50).is_ok());
    assert!(by_name("vehicle", 200).is_ok());
    assert!(by_name("unknown", 50).is_err());
}

#[test]
fn experiment_protocol_lays_out_disjoint_seed_sets() {
    let bundle = example1_bundle(500).unwrap();
    let manifest =
        experiment_protocol(&bundle, "example1", 20, 2, 0.002, 100, 50, 300.0, 5.0, 42).unwrap();
    assert_eq!(manifest.attack_start_step, 300);
    assert_eq!(manifest.blend_steps, 5);
    assert_eq!(manifest.calibration_seeds.len(), 100);
    assert_eq!(manifest.trial_seeds.len(), 50);
    assert_eq!(manifest.sys_fingerprint, bundle.sys.fingerprint());
    let mut all: Vec<u64> = manifest
        .calibration_seeds
        .iter()
        .chain(manifest.trial_seeds.iter())
        .copied()
        .collect();
    all.sort_unstable();
    all.dedup();
    assert_eq!(all.len(), 150);

    // Attack start past the horizon is a configuration error.
    assert!(
        experiment_protocol(&bundle, "example1", 20, 2, 0.002, 10, 5, 600.0, 5.0, 42).is_err()
    );
}
