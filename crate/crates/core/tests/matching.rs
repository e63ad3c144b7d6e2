use slam_core::calibration::{calibrate_scan, CalibrationParams};
use slam_core::features::{select_features, FeatureSet, FeatureWeights};
use slam_core::mapping::{MapConfig, MapState};
use slam_core::matching::{build_residuals, solve_pose, MatchError, SolverSettings};
use slam_core::simulator::{presets, render_scan, Scene, SensorModel};
use slam_core::{Pose, Scan};

fn sensor() -> SensorModel {
    SensorModel::vlp16().noiseless()
}

fn geometry_only() -> SolverSettings {
    SolverSettings { intensity_weight: 0.0, ..Default::default() }
}

/// Calibrated scan with intensities normalized to unit mean, as the pipeline
/// feeds the matcher.
fn prepare(scene: &Scene, pose: &Pose, seed: u64) -> (Scan, FeatureSet) {
    let scan = render_scan(scene, pose, &sensor(), seed).unwrap();
    let mut cal = calibrate_scan(&scan, &CalibrationParams::default()).unwrap();
    let mean = cal.points.iter().map(|p| p.calibrated_intensity).sum::<f64>() / cal.len() as f64;
    for p in &mut cal.points {
        p.calibrated_intensity /= mean;
    }
    let feats = select_features(&cal, &FeatureWeights::default());
    (cal, feats)
}

fn map_at(scan: &Scan, feats: &FeatureSet, pose: &Pose) -> MapState {
    let mut map = MapState::new(&MapConfig::indoor());
    map.insert_scan(scan, pose, feats);
    map
}

fn errors(est: &Pose, truth: &Pose) -> (f64, f64) {
    let e = est.inverse() * *truth;
    (e.translation.norm(), e.rotation_angle().to_degrees())
}

#[test]
fn recovers_small_offset_in_room() {
    let scene = presets::room();
    let (scan0, f0) = prepare(&scene, &Pose::identity(), 1);
    let map = map_at(&scan0, &f0, &Pose::identity());
    let truth = Pose::from_xyz_yaw(0.1, 0.02, 0.0, 0.02);
    let (_, feats) = prepare(&scene, &truth, 2);
    for settings in [SolverSettings::default(), geometry_only()] {
        let res = solve_pose(&feats, &Pose::identity(), &map, &settings).unwrap();
        let (dt, dr) = errors(&res.pose, &truth);
        assert!(dt < 1e-4, "translation error {dt}");
        assert!(dr < 1e-3, "rotation error {dr}");
    }
}

#[test]
fn accepted_steps_never_raise_the_cost() {
    let scene = presets::room();
    let (scan0, f0) = prepare(&scene, &Pose::identity(), 1);
    let map = map_at(&scan0, &f0, &Pose::identity());
    for (i, truth) in [
        Pose::from_xyz_yaw(0.15, -0.05, 0.0, 0.0),
        Pose::from_xyz_yaw(-0.1, 0.1, 0.02, -0.04),
        Pose::from_xyz_yaw(0.0, 0.2, 0.0, 0.05),
    ]
    .iter()
    .enumerate()
    {
        let (_, feats) = prepare(&scene, truth, 10 + i as u64);
        let res = solve_pose(&feats, &Pose::identity(), &map, &SolverSettings::default()).unwrap();
        assert!(!res.step_costs.is_empty());
        for (before, after) in &res.step_costs {
            assert!(after <= before, "{after} > {before}");
        }
    }
}

#[test]
fn solution_is_left_invariant_under_grid_motions() {
    let scene = presets::room();
    let anchor = Pose::from_xyz_yaw(0.3, -0.2, 0.0, 0.1);
    let (scan0, f0) = prepare(&scene, &anchor, 1);
    let truth = Pose::from_xyz_yaw(0.38, -0.15, 0.0, 0.12);
    let (_, feats) = prepare(&scene, &truth, 2);
    let settings = geometry_only();

    let base = solve_pose(&feats, &anchor, &map_at(&scan0, &f0, &anchor), &settings).unwrap();
    // whole-metre shift and quarter turn map every voxel grid onto itself
    let g = Pose::from_xyz_yaw(3.0, -2.0, 1.0, std::f64::consts::FRAC_PI_2);
    let moved_map = map_at(&scan0, &f0, &(g * anchor));
    let moved = solve_pose(&feats, &(g * anchor), &moved_map, &settings).unwrap();
    let diff = moved.pose.max_abs_diff(&(g * base.pose));
    assert!(diff < 1e-6, "{diff}");
}

#[test]
fn self_match_has_zero_residuals() {
    let scene = presets::room();
    let pose = Pose::from_xyz_yaw(0.5, -0.3, 0.0, 0.2);
    let (scan, feats) = prepare(&scene, &pose, 1);
    let map = map_at(&scan, &feats, &pose);
    let terms = build_residuals(&feats, &pose, &map, &geometry_only()).unwrap();
    assert!(terms.iter().all(|t| t.value.abs() < 1e-9));
    let res = solve_pose(&feats, &pose, &map, &SolverSettings::default()).unwrap();
    assert!(res.pose.max_abs_diff(&pose) < 1e-6);
    assert!(res.iterations <= 2);
}

#[test]
fn far_correspondences_are_rejected() {
    let scene = presets::room();
    let (scan, feats) = prepare(&scene, &Pose::identity(), 1);
    let map = map_at(&scan, &feats, &Pose::identity());
    let far = Pose::from_translation(0.0, 0.0, 50.0);
    assert!(matches!(
        build_residuals(&feats, &far, &map, &SolverSettings::default()),
        Err(MatchError::InsufficientCorrespondences { .. })
    ));
}
