//! Front-end odometry, back-end loop closure and the on-disk run driver.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Receiver, Sender};
use std::thread::JoinHandle;

use thiserror::Error;
use web_time::Instant;

use crate::calibration::{calibrate_scan, CalibrationError};
use crate::config::{ConfigError, Mode, PipelineConfig};
use crate::evaluation::{evaluate_auto, ErrorReport, EvalError, TrajectoryPair};
use crate::features::{select_features, FeatureSet, FeatureWeights};
use crate::geometry::{Pose, Scan};
use crate::io::{export_ply, open_sequence, write_trajectory, IoError};
use crate::loop_closure::{
    build_submap, compute_isc, detect_loop, is_keyframe, shift_to_yaw, verify_consistency, Keyframe,
};
use crate::mapping::MapState;
use crate::matching::{predict_initial, solve_pose, SolverSettings};
use crate::pose_graph::{propagate_correction, GraphError, PoseGraph};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("frame {frame}: {source}")]
    Calibration {
        frame: usize,
        source: CalibrationError,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("no scans found")]
    NoScans,
    #[error("back-end thread panicked")]
    BackEndPanicked,
    #[error("{path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Wall-clock milliseconds spent in each front-end stage of one frame.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FrameTiming {
    pub frame: usize,
    pub decode: f64,
    pub calibrate: f64,
    pub features: f64,
    pub matching: f64,
    pub mapping: f64,
    pub keyframe: f64,
}

impl FrameTiming {
    pub fn total(&self) -> f64 {
        self.decode + self.calibrate + self.features + self.matching + self.mapping + self.keyframe
    }
}

pub fn timing_csv(rows: &[FrameTiming]) -> String {
    let mut out = String::from("frame,decode_ms,calibrate_ms,features_ms,match_ms,map_ms,keyframe_ms,total_ms\n");
    for t in rows {
        let _ = writeln!(
            out,
            "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            t.frame,
            t.decode,
            t.calibrate,
            t.features,
            t.matching,
            t.mapping,
            t.keyframe,
            t.total()
        );
    }
    out
}

/// An accepted loop between two keyframes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopRecord {
    pub current_keyframe: usize,
    pub candidate_keyframe: usize,
    pub current_frame: usize,
    pub candidate_frame: usize,
    pub score: f64,
    pub fitness: f64,
}

pub fn loops_text(loops: &[LoopRecord]) -> String {
    let mut out = String::from("# current_kf candidate_kf current_frame candidate_frame score fitness\n");
    for l in loops {
        let _ = writeln!(
            out,
            "{} {} {} {} {:.6} {:.6}",
            l.current_keyframe, l.candidate_keyframe, l.current_frame, l.candidate_frame, l.score, l.fitness
        );
    }
    out
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// Loop detection, verification and graph optimization over keyframes.
#[derive(Debug)]
pub struct BackEnd {
    config: PipelineConfig,
    database: Vec<Keyframe>,
    graph: PoseGraph,
    loops: Vec<LoopRecord>,
    warnings: Vec<String>,
}

/// Keyframe poses after an optimization, indexed by keyframe id.
#[derive(Debug, Clone, PartialEq)]
pub struct Correction {
    pub poses: Vec<Pose>,
}

impl BackEnd {
    pub fn new(config: &PipelineConfig) -> Self {
        Self {
            config: config.clone(),
            database: Vec::new(),
            graph: PoseGraph::new(),
            loops: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn graph(&self) -> &PoseGraph {
        &self.graph
    }

    pub fn loops(&self) -> &[LoopRecord] {
        &self.loops
    }

    /// Adds a keyframe; returns the new keyframe table when a loop was closed.
    pub fn add_keyframe(&mut self, kf: Keyframe) -> Result<Option<Correction>, GraphError> {
        let optimized = self.graph.poses();
        // odometry increment applied on top of the corrected previous keyframe
        let here = match self.database.last() {
            Some(prev) => optimized[prev.id] * (prev.pose.inverse() * kf.pose),
            None => kf.pose,
        };
        let id = self.graph.add_node(here);
        if let Some(prev) = self.database.last() {
            self.graph
                .add_odometry_edge(id - 1, id, prev.pose.inverse() * kf.pose)?;
        }
        let positions: Vec<_> = optimized.iter().map(|p| p.translation).collect();
        let candidate = detect_loop(&kf, &self.database, &self.config.loops, Some(&positions), Some(here.translation));
        self.database.push(kf);
        let Some(candidate) = candidate else {
            return Ok(None);
        };

        let current = &self.database[id];
        let c = candidate.index;
        let n = self.config.loops.submap_neighbors;
        let origin = optimized[c];
        let mut members = vec![(&self.database[c], origin)];
        let lo = c.saturating_sub(n);
        let hi = (c + n).min(id.saturating_sub(self.config.loops.exclusion));
        for k in (lo..=hi).filter(|&k| k != c) {
            members.push((&self.database[k], optimized[k]));
        }
        let submap = build_submap(&members, &self.config.map);
        let yaw = shift_to_yaw(candidate.shift, self.config.loops.isc.n_sectors);
        let (_, settings) = self.config.effective_front_end();
        let v = verify_consistency(current, &submap, yaw, &settings, self.config.loops.fitness_threshold);
        if !v.accepted {
            return Ok(None);
        }
        let ratio = self.config.loops.max_drift_ratio;
        if ratio > 0.0 {
            let path: f64 = self.database[c..=id]
                .windows(2)
                .map(|w| (w[1].pose.translation - w[0].pose.translation).norm())
                .sum();
            let implied = (origin * v.relative_pose).translation;
            if (implied - here.translation).norm() > ratio * path {
                return Ok(None);
            }
        }
        self.graph.add_loop_edge(c, id, v.relative_pose)?;
        self.loops.push(LoopRecord {
            current_keyframe: id,
            candidate_keyframe: candidate.id,
            current_frame: current.frame_index,
            candidate_frame: self.database[c].frame_index,
            score: candidate.score,
            fitness: v.fitness,
        });
        match self.graph.optimize(&self.config.graph) {
            Ok(_) => {}
            Err(GraphError::SolverDiverged) => {
                self.warnings
                    .push(format!("keyframe {id}: pose graph optimization diverged, keeping previous estimate"));
            }
            Err(e) => return Err(e),
        }
        Ok(Some(Correction {
            poses: self.graph.poses(),
        }))
    }
}

enum BackEndHandle {
    Inline(Box<BackEnd>),
    Threaded {
        keyframes: Sender<Keyframe>,
        corrections: Receiver<Correction>,
        worker: JoinHandle<Result<BackEnd, GraphError>>,
    },
}

/// Everything a finished run produced.
#[derive(Debug)]
pub struct RunOutput {
    /// One pose per frame, loop corrections applied.
    pub trajectory: Vec<Pose>,
    /// Front-end poses before any correction.
    pub odometry: Vec<Pose>,
    pub keyframe_frames: Vec<usize>,
    pub loops: Vec<LoopRecord>,
    pub timing: Vec<FrameTiming>,
    pub map: MapState,
    /// Pose graph edge dump; empty in odometry mode.
    pub graph_edges: String,
    pub warnings: Vec<String>,
}

/// Incremental SLAM: feed scans in order with [`process`](Self::process),
/// then call [`finish`](Self::finish).
pub struct Pipeline {
    config: PipelineConfig,
    weights: FeatureWeights,
    settings: SolverSettings,
    map: MapState,
    odometry: Vec<Pose>,
    timing: Vec<FrameTiming>,
    keyframe_frames: Vec<usize>,
    last_keyframe: Option<(Pose, f64)>,
    intensity_scale: Option<f64>,
    backend: Option<BackEndHandle>,
    latest_correction: Option<Correction>,
    warnings: Vec<String>,
}

impl Pipeline {
    pub fn new(config: &PipelineConfig) -> Self {
        let (weights, settings) = config.effective_front_end();
        let backend = match config.mode {
            Mode::Odometry => None,
            Mode::Full if config.sync => Some(BackEndHandle::Inline(Box::new(BackEnd::new(config)))),
            Mode::Full => {
                let (kf_tx, kf_rx) = mpsc::channel::<Keyframe>();
                let (corr_tx, corr_rx) = mpsc::channel();
                let mut backend = BackEnd::new(config);
                let worker = std::thread::spawn(move || {
                    for kf in kf_rx {
                        if let Some(c) = backend.add_keyframe(kf)? {
                            // the front-end may already be gone; the final table is returned anyway
                            let _ = corr_tx.send(c);
                        }
                    }
                    Ok(backend)
                });
                Some(BackEndHandle::Threaded {
                    keyframes: kf_tx,
                    corrections: corr_rx,
                    worker,
                })
            }
        };
        Self {
            config: config.clone(),
            weights,
            settings,
            map: MapState::new(&config.map),
            odometry: Vec::new(),
            timing: Vec::new(),
            keyframe_frames: Vec::new(),
            last_keyframe: None,
            intensity_scale: (config.intensity_scale > 0.0).then_some(config.intensity_scale),
            backend,
            latest_correction: None,
            warnings: Vec::new(),
        }
    }

    pub fn frames(&self) -> usize {
        self.odometry.len()
    }

    pub fn map(&self) -> &MapState {
        &self.map
    }

    /// Keyframe table from the most recent loop closure seen so far.
    pub fn latest_correction(&self) -> Option<&Correction> {
        self.latest_correction.as_ref()
    }

    /// Calibrates a raw scan and selects its features.
    fn prepare(&mut self, scan: &Scan, timing: &mut FrameTiming) -> Result<(Scan, FeatureSet), PipelineError> {
        let t = Instant::now();
        let (calibrated, scale) = calibrate_normalized(scan, &self.config, self.intensity_scale)
            .map_err(|source| PipelineError::Calibration {
                frame: self.odometry.len(),
                source,
            })?;
        self.intensity_scale = Some(scale);
        timing.calibrate = ms(t);
        let t = Instant::now();
        let features = select_features(&calibrated, &self.weights);
        timing.features = ms(t);
        Ok((calibrated, features))
    }

    /// Runs the front-end on one raw scan (sensor frame) and returns its
    /// odometry pose. `decode_ms` is recorded as the decode stage time.
    pub fn process(&mut self, scan: &Scan, decode_ms: f64) -> Result<Pose, PipelineError> {
        let k = self.odometry.len();
        let mut timing = FrameTiming {
            frame: k,
            decode: decode_ms,
            ..Default::default()
        };
        let (calibrated, features) = self.prepare(scan, &mut timing)?;

        let t = Instant::now();
        let pose = match k {
            0 => Pose::identity(),
            _ => {
                let prev = self.odometry[k - 1];
                let predicted = match k {
                    1 => prev,
                    _ => predict_initial(&prev, &self.odometry[k - 2]),
                };
                self.map.begin_frame(scan.frame_index, &predicted);
                match solve_pose(&features, &predicted, &self.map, &self.settings) {
                    Ok(r) => r.pose,
                    Err(e) => {
                        self.warnings
                            .push(format!("frame {k}: {e}; using constant-velocity prediction"));
                        predicted
                    }
                }
            }
        };
        timing.matching = ms(t);

        let t = Instant::now();
        self.map.insert_scan(&calibrated, &pose, &features);
        timing.mapping = ms(t);

        let t = Instant::now();
        let new_keyframe = match self.last_keyframe {
            None => true,
            Some((kf_pose, kf_time)) => is_keyframe(&pose, &kf_pose, scan.timestamp - kf_time, &self.config.keyframe),
        };
        if new_keyframe {
            self.last_keyframe = Some((pose, scan.timestamp));
            self.keyframe_frames.push(k);
            if self.backend.is_some() {
                let isc = &self.config.loops.isc;
                let kf = Keyframe {
                    id: self.keyframe_frames.len() - 1,
                    frame_index: k,
                    pose,
                    descriptor: compute_isc(&calibrated, isc.n_rings, isc.n_sectors, isc.max_range),
                    features,
                    timestamp: scan.timestamp,
                };
                self.send_keyframe(kf)?;
            }
        }
        timing.keyframe = ms(t);

        self.odometry.push(pose);
        self.timing.push(timing);
        Ok(pose)
    }

    fn send_keyframe(&mut self, kf: Keyframe) -> Result<(), PipelineError> {
        match self.backend.as_mut() {
            Some(BackEndHandle::Inline(b)) => {
                if let Some(c) = b.add_keyframe(kf)? {
                    self.latest_correction = Some(c);
                }
            }
            Some(BackEndHandle::Threaded {
                keyframes, corrections, ..
            }) => {
                // a closed channel means the worker failed; finish() reports why
                let _ = keyframes.send(kf);
                if let Some(c) = corrections.try_iter().last() {
                    self.latest_correction = Some(c);
                }
            }
            None => {}
        }
        Ok(())
    }

    /// Waits for the back-end and assembles the corrected trajectory.
    pub fn finish(mut self) -> Result<RunOutput, PipelineError> {
        if self.odometry.is_empty() {
            return Err(PipelineError::NoScans);
        }
        let backend = match self.backend.take() {
            None => None,
            Some(BackEndHandle::Inline(b)) => Some(*b),
            Some(BackEndHandle::Threaded {
                keyframes,
                corrections,
                worker,
            }) => {
                drop(keyframes);
                let b = worker.join().map_err(|_| PipelineError::BackEndPanicked)??;
                if let Some(c) = corrections.try_iter().last() {
                    self.latest_correction = Some(c);
                }
                Some(b)
            }
        };
        let mut warnings = self.warnings;
        let (trajectory, loops, graph_edges) = match backend {
            None => (self.odometry.clone(), Vec::new(), String::new()),
            Some(b) => {
                warnings.extend(b.warnings.iter().cloned());
                let before: Vec<Pose> = self.keyframe_frames.iter().map(|&f| self.odometry[f]).collect();
                let trajectory = propagate_correction(&before, &b.graph.poses(), &self.keyframe_frames, &self.odometry);
                (trajectory, b.loops, b.graph.dump_edges())
            }
        };
        Ok(RunOutput {
            trajectory,
            odometry: self.odometry,
            keyframe_frames: self.keyframe_frames,
            loops,
            timing: self.timing,
            map: self.map,
            graph_edges,
            warnings,
        })
    }
}

/// Calibrates a raw scan and divides its intensities by `scale`, or by the
/// scan's own mean calibrated intensity when `scale` is `None`. Returns the
/// scale used.
pub fn calibrate_normalized(
    scan: &Scan,
    config: &PipelineConfig,
    scale: Option<f64>,
) -> Result<(Scan, f64), CalibrationError> {
    let mut scan = scan.clone();
    scan.assign_rings_by_azimuth_wrap();
    let mut calibrated = calibrate_scan(&scan, &config.calibration)?;
    let scale = scale.unwrap_or_else(|| {
        let mean = calibrated.points.iter().map(|p| p.calibrated_intensity).sum::<f64>() / calibrated.len() as f64;
        if mean > 0.0 {
            mean
        } else {
            1.0
        }
    });
    for p in &mut calibrated.points {
        p.calibrated_intensity /= scale;
    }
    Ok((calibrated, scale))
}

/// Keyframe for `scan` as the pipeline would build it, with the given id and
/// pose and intensities normalized by `scale` (see [`calibrate_normalized`]).
pub fn make_keyframe(
    scan: &Scan,
    config: &PipelineConfig,
    scale: Option<f64>,
    id: usize,
    pose: Pose,
) -> Result<Keyframe, CalibrationError> {
    let (calibrated, _) = calibrate_normalized(scan, config, scale)?;
    let (weights, _) = config.effective_front_end();
    let isc = &config.loops.isc;
    Ok(Keyframe {
        id,
        frame_index: scan.frame_index,
        pose,
        descriptor: compute_isc(&calibrated, isc.n_rings, isc.n_sectors, isc.max_range),
        features: select_features(&calibrated, &weights),
        timestamp: scan.timestamp,
    })
}

/// Runs the whole pipeline over in-memory scans.
pub fn run_scans(scans: &[Scan], config: &PipelineConfig) -> Result<RunOutput, PipelineError> {
    let mut pipeline = Pipeline::new(config);
    for scan in scans {
        pipeline.process(scan, 0.0)?;
    }
    pipeline.finish()
}

/// Expresses a trajectory relative to its first pose.
pub fn relative_to_first(poses: &[Pose]) -> Vec<Pose> {
    let Some(first) = poses.first() else {
        return Vec::new();
    };
    let inv = first.inverse();
    poses.iter().map(|p| inv * *p).collect()
}

/// Error of an estimate (starting at identity) against ground truth of any
/// origin.
pub fn evaluate_run(estimate: &[Pose], ground_truth: &[Pose]) -> Result<ErrorReport, EvalError> {
    let pair = TrajectoryPair::new(estimate.to_vec(), relative_to_first(ground_truth))?;
    evaluate_auto(&pair)
}

/// Summary of an on-disk run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub frames: usize,
    pub keyframes: usize,
    pub loops: usize,
    pub dropped_points: usize,
    pub mean_ms_per_frame: f64,
    pub report: Option<ErrorReport>,
    pub warnings: Vec<String>,
}

fn write_file(path: &Path, contents: &str) -> Result<(), PipelineError> {
    fs::write(path, contents).map_err(|source| PipelineError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn run_sequence(config: &PipelineConfig) -> Result<(RunOutput, Option<Vec<Pose>>, usize), PipelineError> {
    config.validate_paths()?;
    let input = config
        .input
        .as_ref()
        .ok_or_else(|| ConfigError::MissingPath(PathBuf::from("<input>")))?;
    let source = match open_sequence(input, config.ground_truth.as_deref()) {
        Err(IoError::NoScans(_)) => return Err(PipelineError::NoScans),
        other => other?,
    };
    let mut pipeline = Pipeline::new(config);
    let mut dropped = 0;
    for k in 0..source.scan_paths.len() {
        let t = Instant::now();
        let decoded = source.load_scan(k, config.scan_period)?;
        dropped += decoded.dropped;
        pipeline.process(&decoded.scan, ms(t))?;
    }
    Ok((pipeline.finish()?, source.ground_truth, dropped))
}

/// Runs the pipeline on `config.input` and writes trajectory, map, timing,
/// loops and (with ground truth) evaluation files to `config.output`.
pub fn run(config: &PipelineConfig) -> Result<RunSummary, PipelineError> {
    let (out, ground_truth, dropped) = run_sequence(config)?;
    let report = match &ground_truth {
        Some(gt) if gt.len() == out.trajectory.len() => Some(evaluate_run(&out.trajectory, gt)?),
        Some(gt) => return Err(EvalError::LengthMismatch(out.trajectory.len(), gt.len()).into()),
        None => None,
    };
    if let Some(dir) = &config.output {
        fs::create_dir_all(dir).map_err(|source| PipelineError::Write {
            path: dir.clone(),
            source,
        })?;
        write_file(&dir.join("trajectory.txt"), &write_trajectory(&out.trajectory)?)?;
        write_file(&dir.join("timing.csv"), &timing_csv(&out.timing))?;
        write_file(&dir.join("loops.txt"), &loops_text(&out.loops))?;
        if config.write_map {
            write_file(&dir.join("map.ply"), &export_ply(&out.map.intensity))?;
        }
        if config.mode == Mode::Full {
            write_file(&dir.join("graph_edges.txt"), &out.graph_edges)?;
        }
        if let Some(r) = &report {
            write_file(&dir.join("eval.csv"), &r.to_csv())?;
        }
    }
    Ok(RunSummary {
        frames: out.trajectory.len(),
        keyframes: out.keyframe_frames.len(),
        loops: out.loops.len(),
        dropped_points: dropped,
        mean_ms_per_frame: mean_ms(&out.timing),
        report,
        warnings: out.warnings,
    })
}

fn mean_ms(timing: &[FrameTiming]) -> f64 {
    timing.iter().map(FrameTiming::total).sum::<f64>() / timing.len().max(1) as f64
}

/// Front-end variants compared by [`ablate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationMode {
    /// Edge and plane residuals only.
    Geometric,
    /// Odometry with intensity features and residuals.
    Intensity,
    /// Intensity odometry plus loop closure.
    Full,
}

impl AblationMode {
    pub const ALL: [AblationMode; 3] = [AblationMode::Geometric, AblationMode::Intensity, AblationMode::Full];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Geometric => "geometric",
            AblationMode::Intensity => "intensity",
            AblationMode::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn apply(self, config: &PipelineConfig) -> PipelineConfig {
        let mut c = config.clone();
        c.use_intensity = self != AblationMode::Geometric;
        c.mode = if self == AblationMode::Full { Mode::Full } else { Mode::Odometry };
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub ate_percent: f64,
    pub are_deg_per_m: f64,
    pub mean_ms_per_frame: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("mode,ate_percent,are_deg_per_m,mean_ms_per_frame\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.mode.name(),
            r.ate_percent,
            r.are_deg_per_m,
            r.mean_ms_per_frame
        );
    }
    out
}

/// Runs every mode over the same in-memory scans.
pub fn ablate_scans(
    scans: &[Scan],
    ground_truth: &[Pose],
    config: &PipelineConfig,
    modes: &[AblationMode],
) -> Result<Vec<AblationRow>, PipelineError> {
    modes
        .iter()
        .map(|&mode| {
            let out = run_scans(scans, &mode.apply(config))?;
            let report = evaluate_run(&out.trajectory, ground_truth)?;
            Ok(AblationRow {
                mode,
                ate_percent: report.ate_percent,
                are_deg_per_m: report.are_deg_per_m,
                mean_ms_per_frame: mean_ms(&out.timing),
            })
        })
        .collect()
}

/// Runs every mode over `config.input`, which must come with ground truth.
pub fn ablate(config: &PipelineConfig, modes: &[AblationMode]) -> Result<Vec<AblationRow>, PipelineError> {
    modes
        .iter()
        .map(|&mode| {
            let (out, gt, _) = run_sequence(&mode.apply(config))?;
            let gt = gt.ok_or_else(|| ConfigError::MissingPath(PathBuf::from("<ground truth>")))?;
            let report = evaluate_run(&out.trajectory, &gt)?;
            Ok(AblationRow {
                mode,
                ate_percent: report.ate_percent,
                are_deg_per_m: report.are_deg_per_m,
                mean_ms_per_frame: mean_ms(&out.timing),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{generate_sequence, presets, SensorModel};
    use nalgebra::Vector3;

    fn short_room_run() -> (Vec<Scan>, Vec<Pose>) {
        let traj = presets::arc(Pose::identity(), 6, 0.1, 1f64.to_radians());
        generate_sequence(&presets::room(), &traj, &SensorModel::vlp16(), 11, 0.1).unwrap()
    }

    #[test]
    fn runs_every_frame_and_times_every_stage() {
        let (scans, _) = short_room_run();
        let config = PipelineConfig {
            sync: true,
            ..Default::default()
        };
        let out = run_scans(&scans, &config).unwrap();
        assert_eq!(out.trajectory.len(), scans.len());
        assert_eq!(out.timing.len(), scans.len());
        assert!(out.timing.iter().all(|t| [t.decode, t.calibrate, t.features, t.matching, t.mapping, t.keyframe]
            .iter()
            .all(|v| *v >= 0.0)));
        assert_eq!(out.keyframe_frames[0], 0);
        let csv = timing_csv(&out.timing);
        assert_eq!(csv.lines().count(), scans.len() + 1);
    }

    #[test]
    fn threaded_and_sync_agree() {
        let (scans, _) = short_room_run();
        let sync = run_scans(&scans, &PipelineConfig { sync: true, ..Default::default() }).unwrap();
        let threaded = run_scans(&scans, &PipelineConfig::default()).unwrap();
        assert_eq!(sync.trajectory, threaded.trajectory);
    }

    #[test]
    fn odometry_mode_builds_no_graph() {
        let (scans, _) = short_room_run();
        let config = PipelineConfig {
            mode: Mode::Odometry,
            ..Default::default()
        };
        let out = run_scans(&scans, &config).unwrap();
        assert!(out.graph_edges.is_empty());
        assert!(out.loops.is_empty());
        assert_eq!(out.trajectory, out.odometry);
    }

    #[test]
    fn empty_input_reports_no_scans() {
        assert!(matches!(run_scans(&[], &PipelineConfig::default()), Err(PipelineError::NoScans)));
    }

    #[test]
    fn relative_ground_truth() {
        let gt = vec![Pose::from_translation(5.0, 0.0, 0.0), Pose::from_translation(6.0, 0.0, 0.0)];
        let rel = relative_to_first(&gt);
        assert_eq!(rel[0], Pose::identity());
        assert_eq!(rel[1].translation, Vector3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn ablation_modes_roundtrip_names() {
        for m in AblationMode::ALL {
            assert_eq!(AblationMode::parse(m.name()), Some(m));
        }
        let rows = [AblationRow {
            mode: AblationMode::Geometric,
            ate_percent: 1.0,
            are_deg_per_m: 0.1,
            mean_ms_per_frame: 3.0,
        }];
        assert_eq!(ablation_csv(&rows).lines().count(), 2);
    }
}
