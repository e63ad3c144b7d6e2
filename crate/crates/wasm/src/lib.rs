//! Browser demo: top-down scan view with feature labels, ISC rotation
//! response, and a short corridor odometry comparison.

use slam_core::calibration::{calibrate_scan, CalibrationParams};
use slam_core::config::PipelineConfig;
use slam_core::features::{select_features, FeatureWeights};
use slam_core::loop_closure::{compute_isc, similarity, IscParams};
use slam_core::pipeline::{evaluate_run, relative_to_first, run_scans, AblationMode};
use slam_core::simulator::{generate_sequence, presets, render_scan, Scene, SensorModel};
use slam_core::{Pose, Scan};
use wasm_bindgen::prelude::*;

fn scene(name: &str) -> Result<Scene, String> {
    match name {
        "room" => Ok(presets::room()),
        "corridor" => Ok(presets::corridor(60.0, 2.0)),
        "loop" => Ok(presets::loop_block()),
        other => Err(format!("unknown scene '{other}'")),
    }
}

fn calibrated(scan: &Scan) -> Result<Scan, String> {
    let mut c = calibrate_scan(scan, &CalibrationParams::default()).map_err(|e| e.to_string())?;
    let mean = c.points.iter().map(|p| p.calibrated_intensity).sum::<f64>() / c.len() as f64;
    for p in &mut c.points {
        p.calibrated_intensity /= mean;
    }
    Ok(c)
}

/// Flattened `[x, y, intensity, class]` per point in the sensor frame; class
/// is 0 for unselected points, 1 for edges and 2 for planars.
pub fn labelled_scan(scene_name: &str, x: f64, y: f64, yaw_deg: f64, w_intensity: f64) -> Result<Vec<f64>, String> {
    let pose = Pose::from_xyz_yaw(x, y, 0.0, yaw_deg.to_radians());
    let scan = render_scan(&scene(scene_name)?, &pose, &SensorModel::vlp16(), 1).map_err(|e| e.to_string())?;
    let scan = calibrated(&scan)?;
    let weights = FeatureWeights {
        w_intensity,
        ..Default::default()
    };
    let features = select_features(&scan, &weights);
    let mut class = vec![0.0; scan.len()];
    for &i in &features.edge_indices {
        class[i] = 1.0;
    }
    for &i in &features.planar_indices {
        class[i] = 2.0;
    }
    Ok(scan
        .points
        .iter()
        .zip(class)
        .flat_map(|(p, c)| [p.position.x, p.position.y, p.calibrated_intensity, c])
        .collect())
}

/// Similarity of the descriptor at `(x, y)` against the one rendered after a
/// `yaw_deg` turn in place, for every sector shift.
pub fn isc_shift_response(scene_name: &str, x: f64, y: f64, yaw_deg: f64) -> Result<Vec<f64>, String> {
    let s = scene(scene_name)?;
    let p = IscParams::default();
    let sensor = SensorModel::vlp16().noiseless();
    let describe = |yaw: f64| -> Result<_, String> {
        let scan = render_scan(&s, &Pose::from_xyz_yaw(x, y, 0.0, yaw), &sensor, 0).map_err(|e| e.to_string())?;
        Ok(compute_isc(&calibrated(&scan)?, p.n_rings, p.n_sectors, p.max_range))
    };
    let base = describe(0.0)?;
    let turned = describe(yaw_deg.to_radians())?;
    (0..p.n_sectors)
        .map(|k| similarity(&turned, &base.shifted(k)).map_err(|e| e.to_string()))
        .collect()
}

pub struct Comparison {
    pub truth: Vec<f64>,
    pub geometric: Vec<f64>,
    pub intensity: Vec<f64>,
    pub ate: [f64; 2],
}

/// Geometric-only against intensity-aided odometry down the striped corridor.
/// Trajectories are flattened `[x, y]` per frame.
pub fn corridor_comparison(frames: usize, seed: u64) -> Result<Comparison, String> {
    let traj = presets::varying_speed_line(frames.max(3), 0.05, 0.25);
    let (scans, gt) = generate_sequence(&presets::corridor(60.0, 2.0), &traj, &SensorModel::vlp16(), seed, 0.1)
        .map_err(|e| e.to_string())?;
    let base = PipelineConfig {
        sync: true,
        ..Default::default()
    };
    let flat = |poses: &[Pose]| -> Vec<f64> { poses.iter().flat_map(|p| [p.translation.x, p.translation.y]).collect() };
    let mut runs = Vec::new();
    for mode in [AblationMode::Geometric, AblationMode::Intensity] {
        let out = run_scans(&scans, &mode.apply(&base)).map_err(|e| e.to_string())?;
        let ate = evaluate_run(&out.trajectory, &gt).map_err(|e| e.to_string())?.ate_percent;
        runs.push((flat(&out.trajectory), ate));
    }
    let (intensity, ate_i) = runs.pop().unwrap();
    let (geometric, ate_g) = runs.pop().unwrap();
    Ok(Comparison {
        truth: flat(&relative_to_first(&gt)),
        geometric,
        intensity,
        ate: [ate_g, ate_i],
    })
}

#[wasm_bindgen(js_name = labelledScan)]
pub fn labelled_scan_js(scene: &str, x: f64, y: f64, yaw_deg: f64, w_intensity: f64) -> Result<Vec<f64>, JsError> {
    labelled_scan(scene, x, y, yaw_deg, w_intensity).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = iscShiftResponse)]
pub fn isc_shift_response_js(scene: &str, x: f64, y: f64, yaw_deg: f64) -> Result<Vec<f64>, JsError> {
    isc_shift_response(scene, x, y, yaw_deg).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = Comparison)]
pub struct ComparisonJs(Comparison);

#[wasm_bindgen(js_class = Comparison)]
impl ComparisonJs {
    #[wasm_bindgen(getter)]
    pub fn truth(&self) -> Vec<f64> {
        self.0.truth.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn geometric(&self) -> Vec<f64> {
        self.0.geometric.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn intensity(&self) -> Vec<f64> {
        self.0.intensity.clone()
    }
    #[wasm_bindgen(getter, js_name = ateGeometric)]
    pub fn ate_geometric(&self) -> f64 {
        self.0.ate[0]
    }
    #[wasm_bindgen(getter, js_name = ateIntensity)]
    pub fn ate_intensity(&self) -> f64 {
        self.0.ate[1]
    }
}

#[wasm_bindgen(js_name = corridorComparison)]
pub fn corridor_comparison_js(frames: usize, seed: u32) -> Result<ComparisonJs, JsError> {
    corridor_comparison(frames, seed as u64)
        .map(ComparisonJs)
        .map_err(|e| JsError::new(&e))
}
