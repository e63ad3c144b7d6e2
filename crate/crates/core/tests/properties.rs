use nalgebra::{DMatrix, Vector3};
use proptest::prelude::*;
use slam_core::calibration::{calibrate_scan, CalibrationParams};
use slam_core::evaluation::{evaluate_frame_gaps, pair_error, trace_angle, TrajectoryPair};
use slam_core::features::{local_distributions, select_features, FeatureSet, FeatureWeights};
use slam_core::io::{read_kitti_poses, read_kitti_scan, write_kitti_scan, write_trajectory};
use slam_core::loop_closure::{detect_loop, shift_max_similarity, similarity, IscDescriptor, Keyframe, LoopParams};
use slam_core::mapping::VoxelIntensityMap;
use slam_core::pose_graph::{edge_residual, GraphSettings, PoseGraph};
use slam_core::simulator::{render_scan, Scene, SensorModel, Surface};
use slam_core::{Point, Pose, Scan};

fn pose() -> impl Strategy<Value = Pose> {
    (prop::array::uniform3(-10.0..10.0f64), prop::array::uniform3(-1.2..1.2f64)).prop_map(|(t, w)| {
        let w = Vector3::from(w);
        let rot = if w.norm() > 1e-9 { Pose::from_axis_angle(&w.normalize(), w.norm()) } else { Pose::identity() };
        Pose::new(rot.rotation, Vector3::from(t))
    })
}

fn rotation() -> impl Strategy<Value = Pose> {
    pose().prop_map(|p| Pose::new(p.rotation, Vector3::zeros()))
}

fn vec3(r: f64) -> impl Strategy<Value = Vector3<f64>> {
    prop::array::uniform3(-r..r).prop_map(Vector3::from)
}

/// Ringed scan of a noisy box-shaped room with two reflectivities per wall.
fn room_scan(seed: u64) -> Scan {
    let mut scene = Scene::new(Vec::new());
    scene.add_room(Vector3::new(-6.0, -4.0, -1.5), Vector3::new(6.0, 4.0, 2.5), 0.5);
    scene.surfaces[2] = scene.surfaces[2].striped(1.5, 0.5, 0.9);
    scene.push(Surface::cuboid(Vector3::new(1.0, 1.0, -1.5), Vector3::new(1.6, 1.6, 2.5), 0.3));
    let sensor = SensorModel {
        horizontal_steps: 600,
        ..SensorModel::vlp16()
    };
    let pose = Pose::from_xyz_yaw((seed % 7) as f64 * 0.3 - 1.0, (seed % 5) as f64 * 0.2 - 0.5, 0.0, seed as f64 * 0.4);
    render_scan(&scene, &pose, &sensor, seed).unwrap()
}

fn descriptor(rings: usize, sectors: usize) -> impl Strategy<Value = IscDescriptor> {
    prop::collection::vec(prop_oneof![Just(0.0), 0.0..2.0f64], rings * sectors).prop_map(move |v| IscDescriptor {
        matrix: DMatrix::from_vec(rings, sectors, v),
        max_range: 50.0,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn compose_with_inverse_is_identity(p in pose()) {
        prop_assert!((p * p.inverse()).rotation_angle() < 1e-9);
    }

    #[test]
    fn rotation_angle_is_conjugation_invariant(p in pose(), g in rotation()) {
        let c = g * p * g.inverse();
        prop_assert!((c.rotation_angle() - p.rotation_angle()).abs() < 1e-9);
    }

    #[test]
    fn apply_is_an_isometry(t in pose(), a in vec3(20.0), b in vec3(20.0)) {
        let d = (t.apply(&a) - t.apply(&b)).norm();
        prop_assert!((d - (a - b).norm()).abs() < 1e-9);
    }

    #[test]
    fn exp_inverts_log(p in pose()) {
        prop_assert!(Pose::exp(&p.log()).max_abs_diff(&p) < 1e-9);
    }

    #[test]
    fn scan_decode_counts_records(pts in prop::collection::vec((vec3(80.0), 0.0..1.0f64), 0..300)) {
        let scan = Scan::new(pts.iter().map(|(p, i)| Point::new(p.x, p.y, p.z, *i)).collect(), 0.0, 0);
        let bytes = write_kitti_scan(&scan);
        let decoded = read_kitti_scan(&bytes).unwrap();
        prop_assert_eq!(decoded.scan.len(), bytes.len() / 16);
        prop_assert_eq!(decoded.dropped, 0);
    }

    #[test]
    fn pose_file_roundtrip(poses in prop::collection::vec(pose(), 1..40)) {
        let text = write_trajectory(&poses).unwrap();
        let back = read_kitti_poses(&text).unwrap();
        prop_assert_eq!(back.len(), poses.len());
        for (a, b) in poses.iter().zip(&back) {
            let d = (a.to_homogeneous() - b.to_homogeneous()).abs().max();
            prop_assert!(d < 1e-6, "{}", d);
        }
    }

    #[test]
    fn running_mean_matches_batch_mean(obs in prop::collection::vec((0..4usize, -5.0..5.0f64), 1..400)) {
        let mut map = VoxelIntensityMap::new(0.4);
        for &(c, eta) in &obs {
            map.update_index([c as i64, 0, 0], eta);
        }
        for c in 0..4 {
            let vals: Vec<f64> = obs.iter().filter(|o| o.0 == c).map(|o| o.1).collect();
            let cell = map.cell(&[c as i64, 0, 0]);
            if vals.is_empty() {
                prop_assert!(cell.is_none());
            } else {
                let batch = vals.iter().sum::<f64>() / vals.len() as f64;
                prop_assert!((cell.unwrap().mean - batch).abs() < 1e-9);
                prop_assert_eq!(cell.unwrap().count, vals.len() as u64);
            }
        }
    }

    #[test]
    fn cell_means_ignore_insertion_order(
        obs in prop::collection::vec((vec3(1.0), 0.0..3.0f64), 1..200),
        perm_seed in any::<u64>(),
    ) {
        let mut a = VoxelIntensityMap::new(0.5);
        for (p, eta) in &obs {
            a.update_cell(p, *eta);
        }
        let mut shuffled = obs.clone();
        let mut s = perm_seed;
        for i in (1..shuffled.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        let mut b = VoxelIntensityMap::new(0.5);
        for (p, eta) in &shuffled {
            b.update_cell(p, *eta);
        }
        let (ca, cb) = (a.sorted_cells(), b.sorted_cells());
        prop_assert_eq!(ca.len(), cb.len());
        for ((ia, x), (ib, y)) in ca.iter().zip(&cb) {
            prop_assert_eq!(ia, ib);
            prop_assert!((x.mean - y.mean).abs() < 1e-9);
        }
    }

    #[test]
    fn trilinear_is_bounded_and_continuous(
        values in prop::collection::vec(-3.0..3.0f64, 27),
        q in prop::array::uniform3(0.5..2.5f64),
        axis in 0..3usize,
        boundary in 1..2i32,
    ) {
        // 3×3×3 block of observed cells; queries stay inside its centre lattice
        let mut map = VoxelIntensityMap::new(1.0);
        for (k, v) in values.iter().enumerate() {
            map.update_index([(k % 3) as i64, ((k / 3) % 3) as i64, (k / 9) as i64], *v);
        }
        let p = Vector3::from(q);
        let value = map.trilinear_query(&p).unwrap();
        let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
        prop_assert!(value >= lo - 1e-12 && value <= hi + 1e-12);

        // the lattice of centres switches cells at half-integers
        let mut at = p;
        at[axis] = boundary as f64 + 0.5;
        let mut below = at;
        below[axis] -= 1e-12;
        let mut above = at;
        above[axis] += 1e-12;
        let (b, a) = (map.trilinear_query(&below).unwrap(), map.trilinear_query(&above).unwrap());
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn isc_similarity_properties(q in descriptor(6, 12), c in descriptor(6, 12), k in 0..12usize) {
        let s = similarity(&q, &c).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
        let (a, _) = shift_max_similarity(&q, &c).unwrap();
        let (b, _) = shift_max_similarity(&c, &q).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        // self-similarity is 1 only when no column is empty
        prop_assume!(q.matrix.column_iter().all(|c| c.iter().any(|v| *v > 0.0)));
        let (s0, k0) = shift_max_similarity(&q, &q).unwrap();
        prop_assert!((s0 - 1.0).abs() < 1e-12);
        prop_assert_eq!(k0, 0);
        // `shifted(12 - k)` is `q` turned by k sectors
        let (sk, shift) = shift_max_similarity(&q, &q.shifted((12 - k) % 12)).unwrap();
        prop_assert!((sk - 1.0).abs() < 1e-12);
        prop_assert_eq!(shift, k);
    }

    #[test]
    fn detect_loop_respects_exclusion(
        descs in prop::collection::vec(descriptor(4, 8), 2..30),
        exclusion in 0..10usize,
    ) {
        let kf = |id: usize, d: &IscDescriptor| Keyframe {
            id,
            frame_index: id * 5,
            pose: Pose::from_translation((id % 3) as f64, 0.0, 0.0),
            features: FeatureSet::default(),
            descriptor: d.clone(),
            timestamp: id as f64,
        };
        let db: Vec<Keyframe> = descs[..descs.len() - 1].iter().enumerate().map(|(i, d)| kf(i, d)).collect();
        let current = kf(db.len(), &descs[0]);
        let params = LoopParams { exclusion, score_threshold: 0.0, ..Default::default() };
        if let Some(c) = detect_loop(&current, &db, &params, None, None) {
            prop_assert!(c.id + exclusion <= current.id);
        }
    }

    #[test]
    fn graph_optimization_properties(
        truth in prop::collection::vec(pose(), 3..12),
        noise in prop::collection::vec(vec3(0.05), 12),
        loop_to in 0..2usize,
    ) {
        let mut graph = PoseGraph::new();
        let mut est = truth[0];
        for (i, t) in truth.iter().enumerate() {
            if i > 0 {
                let m = truth[i - 1].inverse() * *t;
                let m = m * Pose::from_translation(noise[i].x, noise[i].y, noise[i].z);
                est = est * m;
                graph.add_node(est);
                graph.add_odometry_edge(i - 1, i, m).unwrap();
            } else {
                graph.add_node(*t);
            }
        }
        let last = truth.len() - 1;
        graph.add_loop_edge(loop_to, last, truth[loop_to].inverse() * truth[last]).unwrap();
        let node0 = graph.poses()[0];
        let settings = GraphSettings::default();
        let report = graph.optimize(&settings).unwrap();
        prop_assert_eq!(graph.poses()[0], node0);
        prop_assert!(report.final_cost <= report.initial_cost + 1e-12);

        // a loop edge agreeing with the optimum does not move it
        let before = graph.poses();
        graph.add_loop_edge(0, last, before[0].inverse() * before[last]).unwrap();
        graph.optimize(&settings).unwrap();
        for (a, b) in before.iter().zip(graph.poses()) {
            prop_assert!(a.max_abs_diff(&b) < 1e-6);
        }
    }

    #[test]
    fn consistent_edge_has_zero_residual(a in pose(), b in pose()) {
        let r = edge_residual(&(a.inverse() * b), &a, &b);
        prop_assert!(r.norm() < 1e-12);
    }

    #[test]
    fn evaluation_properties(
        gt in prop::collection::vec(pose(), 12..30),
        wobble in prop::collection::vec(vec3(0.2), 30),
        g in rotation(),
    ) {
        let est: Vec<Pose> = gt.iter().zip(&wobble).map(|(p, w)| *p * Pose::from_translation(w.x, w.y, w.z)).collect();
        let pair = TrajectoryPair::new(est.clone(), gt.clone()).unwrap();
        for (i, j) in [(0, 3), (2, 11), (5, 6)] {
            let (t, r) = pair_error(i, j, &pair);
            prop_assert!(t >= 0.0 && r >= 0.0);
        }
        let exact = TrajectoryPair::new(gt.clone(), gt.clone()).unwrap();
        let (t0, r0) = pair_error(1, 9, &exact);
        prop_assert_eq!((t0, r0), (0.0, 0.0));

        let a = evaluate_frame_gaps(&pair, &[1, 5]).unwrap();
        prop_assert_eq!(&a, &evaluate_frame_gaps(&pair, &[1, 5]).unwrap());
        let conj = |v: &[Pose]| v.iter().map(|p| g * *p * g.inverse()).collect::<Vec<_>>();
        let c = evaluate_frame_gaps(&TrajectoryPair::new(conj(&est), conj(&gt)).unwrap(), &[1, 5]).unwrap();
        prop_assert!((a.are_deg_per_m - c.are_deg_per_m).abs() < 1e-6 * (1.0 + a.are_deg_per_m));
        prop_assert!(trace_angle(&Pose::identity()) == 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn calibration_raises_intensity_and_is_count_stable(seed in 0..1000u64) {
        let scan = room_scan(seed);
        let params = CalibrationParams::default();
        let once = calibrate_scan(&scan, &params).unwrap();
        for p in &once.points {
            prop_assert!(p.calibrated_intensity >= p.intensity);
        }
        let twice = calibrate_scan(&once, &params).unwrap();
        prop_assert_eq!(once.len(), twice.len());
    }

    #[test]
    fn feature_selection_invariants(seed in 0..1000u64, k_exp in -2..4i32, w_i in 0.0..2.0f64) {
        let scan = calibrate_scan(&room_scan(seed), &CalibrationParams::default()).unwrap();
        let weights = FeatureWeights { w_intensity: w_i, ..Default::default() };
        let a = select_features(&scan, &weights);
        prop_assert_eq!(&a, &select_features(&scan, &weights));
        let rings = 16;
        prop_assert!(a.edges.len() <= rings * weights.sector_count * weights.edge_count_per_sector);
        prop_assert!(a.planars.len() <= rings * weights.sector_count * weights.planar_count_per_sector);
        prop_assert!(a.edge_indices.iter().all(|i| a.planar_indices.binary_search(i).is_err()));
        prop_assert!(a.scores.iter().all(|s| s.is_finite() && *s >= 0.0));

        // powers of two scale without rounding
        let k = 2f64.powi(k_exp);
        let mut scaled = scan.clone();
        for p in &mut scaled.points {
            p.calibrated_intensity *= k;
        }
        for i in (0..scan.len()).step_by(97) {
            let (_, si) = local_distributions(i, &scan, weights.neighborhood_size).unwrap();
            let (_, sk) = local_distributions(i, &scaled, weights.neighborhood_size).unwrap();
            prop_assert_eq!(sk, si * k);
        }
        let b = select_features(&scaled, &weights);
        prop_assert_eq!(&a.edge_indices, &b.edge_indices);
        prop_assert_eq!(&a.planar_indices, &b.planar_indices);
    }

    #[test]
    fn rendering_is_deterministic(seed in any::<u64>()) {
        let mut scene = Scene::new(Vec::new());
        scene.add_room(Vector3::new(-5.0, -5.0, -1.0), Vector3::new(5.0, 5.0, 2.0), 0.6);
        let sensor = SensorModel { horizontal_steps: 360, ..SensorModel::vlp16() };
        let p = Pose::from_xyz_yaw(0.5, -0.2, 0.0, 0.3);
        prop_assert_eq!(render_scan(&scene, &p, &sensor, seed).unwrap(), render_scan(&scene, &p, &sensor, seed).unwrap());
    }
}
