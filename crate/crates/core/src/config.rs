//! Flat `key = value` pipeline configuration.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::calibration::CalibrationParams;
use crate::features::FeatureWeights;
use crate::loop_closure::{KeyframePolicy, LoopParams};
use crate::mapping::MapConfig;
use crate::matching::SolverSettings;
use crate::pose_graph::GraphSettings;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("`{key}`: cannot parse `{value}`")]
    BadValue { key: String, value: String },
    #[error("`{key}` = {value} is out of range ({expected})")]
    OutOfRange {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("path `{0}` does not exist")]
    MissingPath(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Odometry,
    Full,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "odometry" => Ok(Mode::Odometry),
            "full" => Ok(Mode::Full),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

impl Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Odometry => "odometry",
            Mode::Full => "full",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub calibration: CalibrationParams,
    pub features: FeatureWeights,
    pub map: MapConfig,
    pub odometry: SolverSettings,
    pub loops: LoopParams,
    pub keyframe: KeyframePolicy,
    pub graph: GraphSettings,
    pub mode: Mode,
    /// Feature scoring and matching use intensity.
    pub use_intensity: bool,
    /// Run the back-end inline instead of on its own thread.
    pub sync: bool,
    /// Seconds between scans.
    pub scan_period: f64,
    /// Intensities are divided by this; 0 means the first scan's mean.
    pub intensity_scale: f64,
    pub write_map: bool,
    pub input: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut map = MapConfig::indoor();
        map.features.max_age_frames = Some(100);
        Self {
            calibration: CalibrationParams::default(),
            features: FeatureWeights::default(),
            map,
            odometry: SolverSettings::default(),
            loops: LoopParams::default(),
            keyframe: KeyframePolicy::default(),
            graph: GraphSettings::default(),
            mode: Mode::Full,
            use_intensity: true,
            sync: false,
            scan_period: 0.1,
            intensity_scale: 0.0,
            write_map: true,
            input: None,
            ground_truth: None,
            output: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
    })
}

fn check(ok: bool, key: &str, value: impl Display, expected: &'static str) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::OutOfRange {
            key: key.into(),
            value: value.to_string(),
            expected,
        })
    }
}

impl PipelineConfig {
    /// Every recognised key, in documentation order.
    pub const KEYS: &'static [&'static str] = &[
        "calibration.min_intensity",
        "calibration.use_range_correction",
        "calibration.min_cos_incidence",
        "calibration.normal_neighbors",
        "features.w_geometry",
        "features.w_intensity",
        "features.sector_count",
        "features.edges_per_sector",
        "features.planars_per_sector",
        "map.cell_size",
        "map.downsample_leaf",
        "map.local_window_m",
        "map.max_age_frames",
        "odometry.max_iterations",
        "odometry.intensity_weight",
        "odometry.huber_delta",
        "odometry.correspondence_gate_m",
        "odometry.parameter_tolerance",
        "loop.n_rings",
        "loop.n_sectors",
        "loop.max_range_m",
        "loop.score_threshold",
        "loop.fitness_threshold",
        "loop.search_radius_m",
        "loop.exclusion_keyframes",
        "loop.max_drift_ratio",
        "keyframe.min_translation_m",
        "keyframe.min_rotation_deg",
        "keyframe.max_interval_s",
        "graph.huber_delta",
        "graph.max_iterations",
        "mode",
        "intensity",
        "sync",
        "scan_period_s",
        "intensity_scale",
        "write_map",
        "input",
        "ground_truth",
        "output",
    ];

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key.trim() {
            k @ "calibration.min_intensity" => self.calibration.min_intensity = parse(k, v)?,
            k @ "calibration.use_range_correction" => self.calibration.use_range_correction = parse(k, v)?,
            k @ "calibration.min_cos_incidence" => self.calibration.min_cos_incidence = parse(k, v)?,
            k @ "calibration.normal_neighbors" => self.calibration.normal_neighbors = parse(k, v)?,
            k @ "features.w_geometry" => self.features.w_geometry = parse(k, v)?,
            k @ "features.w_intensity" => self.features.w_intensity = parse(k, v)?,
            k @ "features.sector_count" => self.features.sector_count = parse(k, v)?,
            k @ "features.edges_per_sector" => self.features.edge_count_per_sector = parse(k, v)?,
            k @ "features.planars_per_sector" => self.features.planar_count_per_sector = parse(k, v)?,
            k @ "map.cell_size" => self.map.cell_size = parse(k, v)?,
            k @ "map.downsample_leaf" => self.map.features.downsample_leaf = parse(k, v)?,
            k @ "map.local_window_m" => self.map.features.local_window = parse(k, v)?,
            k @ "map.max_age_frames" => {
                self.map.features.max_age_frames = match v {
                    "none" | "0" => None,
                    _ => Some(parse(k, v)?),
                }
            }
            k @ "odometry.max_iterations" => self.odometry.max_iterations = parse(k, v)?,
            k @ "odometry.intensity_weight" => self.odometry.intensity_weight = parse(k, v)?,
            k @ "odometry.huber_delta" => self.odometry.robust_kernel_delta = parse(k, v)?,
            k @ "odometry.correspondence_gate_m" => self.odometry.correspondence_gate = parse(k, v)?,
            k @ "odometry.parameter_tolerance" => self.odometry.parameter_tolerance = parse(k, v)?,
            k @ "loop.n_rings" => self.loops.isc.n_rings = parse(k, v)?,
            k @ "loop.n_sectors" => self.loops.isc.n_sectors = parse(k, v)?,
            k @ "loop.max_range_m" => self.loops.isc.max_range = parse(k, v)?,
            k @ "loop.score_threshold" => self.loops.score_threshold = parse(k, v)?,
            k @ "loop.fitness_threshold" => self.loops.fitness_threshold = parse(k, v)?,
            k @ "loop.search_radius_m" => self.loops.search_radius = parse(k, v)?,
            k @ "loop.exclusion_keyframes" => self.loops.exclusion = parse(k, v)?,
            k @ "loop.max_drift_ratio" => self.loops.max_drift_ratio = parse(k, v)?,
            k @ "keyframe.min_translation_m" => self.keyframe.min_translation = parse(k, v)?,
            k @ "keyframe.min_rotation_deg" => self.keyframe.min_rotation = parse::<f64>(k, v)?.to_radians(),
            k @ "keyframe.max_interval_s" => self.keyframe.max_interval = parse(k, v)?,
            k @ "graph.huber_delta" => self.graph.huber_delta = parse(k, v)?,
            k @ "graph.max_iterations" => self.graph.max_iterations = parse(k, v)?,
            k @ "mode" => {
                self.mode = v.parse().map_err(|_| ConfigError::BadValue {
                    key: k.into(),
                    value: v.into(),
                })?
            }
            k @ "intensity" => self.use_intensity = parse(k, v)?,
            k @ "sync" => self.sync = parse(k, v)?,
            k @ "scan_period_s" => self.scan_period = parse(k, v)?,
            k @ "intensity_scale" => self.intensity_scale = parse(k, v)?,
            k @ "write_map" => self.write_map = parse(k, v)?,
            "input" => self.input = Some(v.into()),
            "ground_truth" => self.ground_truth = Some(v.into()),
            "output" => self.output = Some(v.into()),
            other => return Err(ConfigError::UnknownKey(other.into())),
        }
        Ok(())
    }

    /// Applies every setting of a config file on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: n + 1 })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Serialises every key so `from_text(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let opt_path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut out = String::new();
        let mut put = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        put("calibration.min_intensity", self.calibration.min_intensity.to_string());
        put("calibration.use_range_correction", self.calibration.use_range_correction.to_string());
        put("calibration.min_cos_incidence", self.calibration.min_cos_incidence.to_string());
        put("calibration.normal_neighbors", self.calibration.normal_neighbors.to_string());
        put("features.w_geometry", self.features.w_geometry.to_string());
        put("features.w_intensity", self.features.w_intensity.to_string());
        put("features.sector_count", self.features.sector_count.to_string());
        put("features.edges_per_sector", self.features.edge_count_per_sector.to_string());
        put("features.planars_per_sector", self.features.planar_count_per_sector.to_string());
        put("map.cell_size", self.map.cell_size.to_string());
        put("map.downsample_leaf", self.map.features.downsample_leaf.to_string());
        put("map.local_window_m", self.map.features.local_window.to_string());
        put(
            "map.max_age_frames",
            self.map.features.max_age_frames.map_or("none".into(), |a| a.to_string()),
        );
        put("odometry.max_iterations", self.odometry.max_iterations.to_string());
        put("odometry.intensity_weight", self.odometry.intensity_weight.to_string());
        put("odometry.huber_delta", self.odometry.robust_kernel_delta.to_string());
        put("odometry.correspondence_gate_m", self.odometry.correspondence_gate.to_string());
        put("odometry.parameter_tolerance", self.odometry.parameter_tolerance.to_string());
        put("loop.n_rings", self.loops.isc.n_rings.to_string());
        put("loop.n_sectors", self.loops.isc.n_sectors.to_string());
        put("loop.max_range_m", self.loops.isc.max_range.to_string());
        put("loop.score_threshold", self.loops.score_threshold.to_string());
        put("loop.fitness_threshold", self.loops.fitness_threshold.to_string());
        put("loop.search_radius_m", self.loops.search_radius.to_string());
        put("loop.exclusion_keyframes", self.loops.exclusion.to_string());
        put("loop.max_drift_ratio", self.loops.max_drift_ratio.to_string());
        put("keyframe.min_translation_m", self.keyframe.min_translation.to_string());
        put("keyframe.min_rotation_deg", self.keyframe.min_rotation.to_degrees().to_string());
        put("keyframe.max_interval_s", self.keyframe.max_interval.to_string());
        put("graph.huber_delta", self.graph.huber_delta.to_string());
        put("graph.max_iterations", self.graph.max_iterations.to_string());
        put("mode", self.mode.to_string());
        put("intensity", self.use_intensity.to_string());
        put("sync", self.sync.to_string());
        put("scan_period_s", self.scan_period.to_string());
        put("intensity_scale", self.intensity_scale.to_string());
        put("write_map", self.write_map.to_string());
        for (k, p) in [("input", &self.input), ("ground_truth", &self.ground_truth), ("output", &self.output)] {
            if let Some(p) = opt_path(p) {
                put(k, p);
            }
        }
        out
    }

    /// Range checks on numeric keys.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let c = &self.calibration;
        check((0.0..=1.0).contains(&c.min_cos_incidence) && c.min_cos_incidence > 0.0, "calibration.min_cos_incidence", c.min_cos_incidence, "(0, 1]")?;
        check(c.min_intensity >= 0.0, "calibration.min_intensity", c.min_intensity, ">= 0")?;
        check(c.normal_neighbors >= 2, "calibration.normal_neighbors", c.normal_neighbors, ">= 2")?;
        let f = &self.features;
        check(f.w_geometry >= 0.0, "features.w_geometry", f.w_geometry, ">= 0")?;
        check(f.w_intensity >= 0.0, "features.w_intensity", f.w_intensity, ">= 0")?;
        check(f.w_geometry + f.w_intensity > 0.0, "features.w_geometry", f.w_geometry, "weights sum > 0")?;
        check(f.sector_count >= 1, "features.sector_count", f.sector_count, ">= 1")?;
        let m = &self.map;
        check(m.cell_size > 0.0, "map.cell_size", m.cell_size, "> 0")?;
        check(m.features.downsample_leaf > 0.0, "map.downsample_leaf", m.features.downsample_leaf, "> 0")?;
        check(m.features.local_window > 0.0, "map.local_window_m", m.features.local_window, "> 0")?;
        let o = &self.odometry;
        check(o.max_iterations >= 1, "odometry.max_iterations", o.max_iterations, ">= 1")?;
        check(o.intensity_weight >= 0.0, "odometry.intensity_weight", o.intensity_weight, ">= 0")?;
        check(o.robust_kernel_delta > 0.0, "odometry.huber_delta", o.robust_kernel_delta, "> 0")?;
        check(o.correspondence_gate > 0.0, "odometry.correspondence_gate_m", o.correspondence_gate, "> 0")?;
        check(o.parameter_tolerance > 0.0, "odometry.parameter_tolerance", o.parameter_tolerance, "> 0")?;
        let l = &self.loops;
        check(l.isc.n_rings >= 1, "loop.n_rings", l.isc.n_rings, ">= 1")?;
        check(l.isc.n_sectors >= 1, "loop.n_sectors", l.isc.n_sectors, ">= 1")?;
        check(l.isc.max_range > 0.0, "loop.max_range_m", l.isc.max_range, "> 0")?;
        check((0.0..=1.0).contains(&l.score_threshold), "loop.score_threshold", l.score_threshold, "[0, 1]")?;
        check(l.fitness_threshold > 0.0, "loop.fitness_threshold", l.fitness_threshold, "> 0")?;
        check(l.search_radius > 0.0, "loop.search_radius_m", l.search_radius, "> 0")?;
        check(l.max_drift_ratio >= 0.0, "loop.max_drift_ratio", l.max_drift_ratio, ">= 0")?;
        let k = &self.keyframe;
        check(k.min_translation >= 0.0, "keyframe.min_translation_m", k.min_translation, ">= 0")?;
        check(k.min_rotation >= 0.0, "keyframe.min_rotation_deg", k.min_rotation.to_degrees(), ">= 0")?;
        check(k.max_interval > 0.0, "keyframe.max_interval_s", k.max_interval, "> 0")?;
        check(self.graph.huber_delta > 0.0, "graph.huber_delta", self.graph.huber_delta, "> 0")?;
        check(self.scan_period > 0.0, "scan_period_s", self.scan_period, "> 0")?;
        check(self.intensity_scale >= 0.0, "intensity_scale", self.intensity_scale, ">= 0")?;
        Ok(())
    }

    /// [`validate`](Self::validate) plus existence of the input paths.
    pub fn validate_paths(&self) -> Result<(), ConfigError> {
        self.validate()?;
        for p in [&self.input, &self.ground_truth].into_iter().flatten() {
            if !p.exists() {
                return Err(ConfigError::MissingPath(p.clone()));
            }
        }
        Ok(())
    }

    /// Feature weights and solver settings with the intensity switch applied.
    pub fn effective_front_end(&self) -> (FeatureWeights, SolverSettings) {
        if self.use_intensity {
            (self.features, self.odometry)
        } else {
            (
                self.features.geometry_only(),
                SolverSettings {
                    intensity_weight: 0.0,
                    ..self.odometry
                },
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        let back = PipelineConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        for key in PipelineConfig::KEYS {
            assert!(c.to_text().contains(key) || ["input", "ground_truth", "output"].contains(key), "{key}");
        }
    }

    #[test]
    fn parses_comments_and_values() {
        let c = PipelineConfig::from_text(
            "# indoor run\nmap.cell_size = 0.5  # coarse\n\nmode=odometry\nintensity = false\nkeyframe.min_rotation_deg = 30\nmap.max_age_frames = none\n",
        )
        .unwrap();
        assert_eq!(c.map.cell_size, 0.5);
        assert_eq!(c.mode, Mode::Odometry);
        assert!(!c.use_intensity);
        assert!((c.keyframe.min_rotation - 30f64.to_radians()).abs() < 1e-15);
        assert_eq!(c.map.features.max_age_frames, None);
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(PipelineConfig::from_text("nonsense"), Err(ConfigError::Syntax { line: 1 }));
        assert!(matches!(PipelineConfig::from_text("foo.bar = 1"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(PipelineConfig::from_text("map.cell_size = big"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(PipelineConfig::from_text("map.cell_size = -1"), Err(ConfigError::OutOfRange { .. })));
        assert!(matches!(
            PipelineConfig::from_text("features.w_geometry = 0\nfeatures.w_intensity = 0"),
            Err(ConfigError::OutOfRange { .. })
        ));
        let mut c = PipelineConfig::default();
        c.input = Some("/definitely/not/here".into());
        assert!(matches!(c.validate_paths(), Err(ConfigError::MissingPath(_))));
    }

    #[test]
    fn no_intensity_zeroes_both_weights() {
        let c = PipelineConfig {
            use_intensity: false,
            ..Default::default()
        };
        let (w, s) = c.effective_front_end();
        assert_eq!((w.w_intensity, s.intensity_weight), (0.0, 0.0));
    }
}
