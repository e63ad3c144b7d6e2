//! Keyframe selection, intensity scan context descriptors and loop
//! verification by registration.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Vector3};
use thiserror::Error;

use crate::features::FeatureSet;
use crate::geometry::{Pose, Scan};
use crate::mapping::{MapConfig, MapState};
use crate::matching::{build_residuals, solve_pose, SolverSettings, TermKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LoopError {
    #[error("descriptor dimensions differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
}

/// `N_r × N_s` polar grid of the maximum calibrated intensity per bin.
#[derive(Debug, Clone, PartialEq)]
pub struct IscDescriptor {
    pub matrix: DMatrix<f64>,
    pub max_range: f64,
}

impl IscDescriptor {
    pub fn zeros(n_rings: usize, n_sectors: usize, max_range: f64) -> Self {
        Self {
            matrix: DMatrix::zeros(n_rings, n_sectors),
            max_range,
        }
    }

    pub fn n_rings(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_sectors(&self) -> usize {
        self.matrix.ncols()
    }

    /// Column `j` of the result is column `(j + shift) mod N_s` of `self`.
    pub fn shifted(&self, shift: usize) -> Self {
        let n = self.n_sectors();
        let matrix = DMatrix::from_fn(self.n_rings(), n, |r, j| self.matrix[(r, (j + shift) % n)]);
        Self {
            matrix,
            max_range: self.max_range,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IscParams {
    pub n_rings: usize,
    pub n_sectors: usize,
    pub max_range: f64,
}

impl Default for IscParams {
    fn default() -> Self {
        Self {
            n_rings: 20,
            n_sectors: 60,
            max_range: 50.0,
        }
    }
}

pub fn compute_isc(scan: &Scan, n_rings: usize, n_sectors: usize, max_range: f64) -> IscDescriptor {
    let mut d = IscDescriptor::zeros(n_rings, n_sectors, max_range);
    let ring_width = max_range / n_rings as f64;
    for p in &scan.points {
        let (x, y) = (p.position.x, p.position.y);
        let rho = x.hypot(y);
        if rho > max_range {
            continue;
        }
        let ring = ((rho / ring_width) as usize).min(n_rings - 1);
        let sector = (((y.atan2(x) + PI) / (2.0 * PI)) * n_sectors as f64) as usize;
        let cell = &mut d.matrix[(ring, sector.min(n_sectors - 1))];
        *cell = cell.max(p.calibrated_intensity.max(0.0));
    }
    d
}

fn check_dims(q: &IscDescriptor, c: &IscDescriptor) -> Result<(), LoopError> {
    if q.matrix.shape() != c.matrix.shape() {
        return Err(LoopError::DimensionMismatch(q.matrix.shape(), c.matrix.shape()));
    }
    Ok(())
}

fn column_cosine(q: &IscDescriptor, c: &IscDescriptor, j: usize, shift: usize) -> f64 {
    let n = c.n_sectors();
    let cj = (j + shift) % n;
    let (mut dot, mut nq, mut nc) = (0.0, 0.0, 0.0);
    for r in 0..q.n_rings() {
        let a = q.matrix[(r, j)];
        let b = c.matrix[(r, cj)];
        dot += a * b;
        nq += a * a;
        nc += b * b;
    }
    if nq == 0.0 || nc == 0.0 {
        return 0.0;
    }
    (dot / (nq.sqrt() * nc.sqrt())).clamp(0.0, 1.0)
}

fn similarity_at(q: &IscDescriptor, c: &IscDescriptor, shift: usize) -> f64 {
    let n = q.n_sectors();
    (0..n).map(|j| column_cosine(q, c, j, shift)).sum::<f64>() / n as f64
}

/// Mean column cosine similarity; all-zero columns contribute 0.
pub fn similarity(q: &IscDescriptor, c: &IscDescriptor) -> Result<f64, LoopError> {
    check_dims(q, c)?;
    Ok(similarity_at(q, c, 0))
}

/// Best similarity over all cyclic column shifts of `c`, with the smallest
/// maximizing shift.
pub fn shift_max_similarity(q: &IscDescriptor, c: &IscDescriptor) -> Result<(f64, usize), LoopError> {
    check_dims(q, c)?;
    let mut best = (f64::NEG_INFINITY, 0);
    for s in 0..q.n_sectors() {
        let score = similarity_at(q, c, s);
        if score > best.0 {
            best = (score, s);
        }
    }
    Ok(best)
}

/// Yaw of the query sensor relative to the candidate implied by a column
/// shift.
pub fn shift_to_yaw(shift: usize, n_sectors: usize) -> f64 {
    let yaw = 2.0 * PI * shift as f64 / n_sectors as f64;
    if yaw > PI {
        yaw - 2.0 * PI
    } else {
        yaw
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyframePolicy {
    pub min_translation: f64,
    pub min_rotation: f64,
    pub max_interval: f64,
}

impl Default for KeyframePolicy {
    fn default() -> Self {
        Self {
            min_translation: 2.0,
            min_rotation: 15f64.to_radians(),
            max_interval: 10.0,
        }
    }
}

impl KeyframePolicy {
    /// Thresholds doubled for large-scale environments.
    pub fn outdoor() -> Self {
        let d = Self::default();
        Self {
            min_translation: 2.0 * d.min_translation,
            min_rotation: 2.0 * d.min_rotation,
            max_interval: 2.0 * d.max_interval,
        }
    }
}

pub fn is_keyframe(current: &Pose, last_kf: &Pose, dt: f64, policy: &KeyframePolicy) -> bool {
    let rel = last_kf.inverse() * *current;
    rel.translation.norm() > policy.min_translation
        || rel.rotation_angle() > policy.min_rotation
        || dt > policy.max_interval
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub id: usize,
    pub frame_index: usize,
    /// Odometry estimate when the keyframe was created.
    pub pose: Pose,
    /// Features in the sensor frame.
    pub features: FeatureSet,
    pub descriptor: IscDescriptor,
    pub timestamp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopParams {
    pub isc: IscParams,
    pub score_threshold: f64,
    pub fitness_threshold: f64,
    pub search_radius: f64,
    pub exclusion: usize,
    /// A verified loop is rejected when the position it implies for the
    /// current keyframe is farther from the current estimate than this
    /// fraction of the path travelled since the candidate. `0` disables it.
    pub max_drift_ratio: f64,
    /// Keyframes on each side of the candidate that form the verification map.
    pub submap_neighbors: usize,
}

impl Default for LoopParams {
    fn default() -> Self {
        Self {
            isc: IscParams::default(),
            score_threshold: 0.65,
            fitness_threshold: 0.3,
            search_radius: 15.0,
            exclusion: 20,
            max_drift_ratio: 0.1,
            submap_neighbors: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopCandidate {
    /// Position of the candidate in the database slice.
    pub index: usize,
    pub id: usize,
    pub score: f64,
    pub shift: usize,
}

/// Highest-scoring keyframe at least `exclusion` ids older than `current`
/// within `search_radius` of it, if it beats `score_threshold`.
///
/// `positions`, when given, overrides the database poses for the proximity
/// gate (for example with optimized poses).
pub fn detect_loop(
    current: &Keyframe,
    database: &[Keyframe],
    params: &LoopParams,
    positions: Option<&[Vector3<f64>]>,
    current_position: Option<Vector3<f64>>,
) -> Option<LoopCandidate> {
    let here = current_position.unwrap_or(current.pose.translation);
    let mut best: Option<LoopCandidate> = None;
    for (index, kf) in database.iter().enumerate() {
        if kf.id + params.exclusion > current.id {
            continue;
        }
        let there = positions.map_or(kf.pose.translation, |p| p[index]);
        if (there - here).norm() > params.search_radius {
            continue;
        }
        let Ok((score, shift)) = shift_max_similarity(&current.descriptor, &kf.descriptor) else {
            continue;
        };
        if score > params.score_threshold && best.is_none_or(|b| score > b.score) {
            best = Some(LoopCandidate {
                index,
                id: kf.id,
                score,
                shift,
            });
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verification {
    pub accepted: bool,
    /// Pose of the current keyframe relative to the candidate.
    pub relative_pose: Pose,
    pub fitness: f64,
}

/// Builds a feature map in the candidate's frame from keyframes and their
/// poses (the candidate first).
pub fn build_submap(keyframes: &[(&Keyframe, Pose)], map_config: &MapConfig) -> MapState {
    let mut config = *map_config;
    config.features.max_age_frames = None;
    let mut map = MapState::new(&config);
    let origin_inv = keyframes[0].1.inverse();
    for (kf, pose) in keyframes {
        let local = origin_inv * *pose;
        for p in &kf.features.edges {
            map.features
                .insert(crate::mapping::FeatureKind::Edge, local.apply(&p.position));
        }
        for p in &kf.features.planars {
            map.features
                .insert(crate::mapping::FeatureKind::Planar, local.apply(&p.position));
        }
    }
    map
}

/// Registers the current keyframe against a submap expressed in the
/// candidate's frame, starting from the ISC yaw hypothesis.
///
/// Fitness is the mean geometric residual with every feature that found no
/// correspondence counted at the correspondence gate.
pub fn verify_consistency(
    current: &Keyframe,
    submap: &MapState,
    yaw_hypothesis: f64,
    settings: &SolverSettings,
    fitness_threshold: f64,
) -> Verification {
    let initial = Pose::from_xyz_yaw(0.0, 0.0, 0.0, yaw_hypothesis);
    let geometry = SolverSettings {
        intensity_weight: 0.0,
        ..*settings
    };
    let rejected = Verification {
        accepted: false,
        relative_pose: initial,
        fitness: f64::INFINITY,
    };
    let Ok(result) = solve_pose(&current.features, &initial, submap, &geometry) else {
        return rejected;
    };
    let Ok(terms) = build_residuals(&current.features, &result.pose, submap, &geometry) else {
        return Verification {
            relative_pose: result.pose,
            ..rejected
        };
    };
    let gate = geometry.correspondence_gate;
    let matched: f64 = terms
        .iter()
        .filter(|t| t.kind != TermKind::Intensity)
        .map(|t| t.value.abs().min(gate))
        .sum();
    let n_matched = terms.iter().filter(|t| t.kind != TermKind::Intensity).count();
    let total = current.features.len().max(1);
    let fitness = (matched + gate * total.saturating_sub(n_matched) as f64) / total as f64;
    Verification {
        accepted: fitness < fitness_threshold,
        relative_pose: result.pose,
        fitness,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_descriptor(rng: &mut ChaCha8Rng, sparsity: f64) -> IscDescriptor {
        let mut d = IscDescriptor::zeros(20, 60, 50.0);
        for v in d.matrix.iter_mut() {
            if rng.random_bool(sparsity) {
                *v = rng.random_range(0.0..2.0);
            }
        }
        d
    }

    #[test]
    fn single_point_bin() {
        let mut p = Point::new(25.0, 0.0, 0.0, 0.8);
        p.calibrated_intensity = 0.8;
        let d = compute_isc(&Scan::new(vec![p], 0.0, 0), 20, 60, 50.0);
        let nonzero: Vec<_> = d.matrix.iter().filter(|v| **v != 0.0).collect();
        assert_eq!(nonzero, vec![&0.8]);
        // azimuth 0 lands in the sector right after the half-turn
        assert_eq!(d.matrix[(10, 30)], 0.8);
        let empty = compute_isc(&Scan::new(vec![], 0.0, 0), 20, 60, 50.0);
        assert!(empty.matrix.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rotation_by_one_sector_shifts_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Point> = (0..500)
            .map(|_| {
                // keep away from sector boundaries so the shift is exact
                let sector = rng.random_range(0..60) as f64;
                let az = -PI + (sector + rng.random_range(0.2..0.8)) * 2.0 * PI / 60.0;
                let r = rng.random_range(1.0..49.0);
                let mut p = Point::new(r * az.cos(), r * az.sin(), 0.0, 1.0);
                p.calibrated_intensity = rng.random_range(0.1..1.0);
                p
            })
            .collect();
        let scan = Scan::new(pts, 0.0, 0);
        let rotated = scan.transformed(&Pose::from_axis_angle(&Vector3::z(), 2.0 * PI / 60.0));
        let a = compute_isc(&scan, 20, 60, 50.0);
        let b = compute_isc(&rotated, 20, 60, 50.0);
        assert_eq!(b.shifted(1), a);
    }

    #[test]
    fn similarity_oracle_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let q = random_descriptor(&mut rng, 0.3);
            let c = random_descriptor(&mut rng, 0.3);
            let s = similarity(&q, &c).unwrap();
            let mut oracle = 0.0;
            for j in 0..60 {
                let a = q.matrix.column(j);
                let b = c.matrix.column(j);
                if a.norm() > 0.0 && b.norm() > 0.0 {
                    oracle += a.dot(&b) / (a.norm() * b.norm());
                }
            }
            assert_abs_diff_eq!(s, oracle / 60.0, epsilon = 1e-12);
            assert!((0.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn self_and_disjoint_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = random_descriptor(&mut rng, 1.0);
        assert_abs_diff_eq!(similarity(&q, &q).unwrap(), 1.0, epsilon = 1e-12);
        let mut a = IscDescriptor::zeros(20, 60, 50.0);
        let mut b = IscDescriptor::zeros(20, 60, 50.0);
        a.matrix[(0, 0)] = 1.0;
        b.matrix[(0, 1)] = 1.0;
        assert_eq!(similarity(&a, &b).unwrap(), 0.0);
        let wrong = IscDescriptor::zeros(10, 60, 50.0);
        assert!(matches!(similarity(&a, &wrong), Err(LoopError::DimensionMismatch(..))));
    }

    #[test]
    fn shift_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = random_descriptor(&mut rng, 0.5);
        for k in [0, 1, 17, 59] {
            // c shifted by k lines up with q at shift k
            let c = q.shifted(60 - k);
            let (score, shift) = shift_max_similarity(&q, &c).unwrap();
            assert_abs_diff_eq!(score, 1.0, epsilon = 1e-12);
            assert_eq!(shift, k);
        }
    }

    #[test]
    fn keyframe_policy() {
        let policy = KeyframePolicy::default();
        let i = Pose::identity();
        assert!(!is_keyframe(&i, &i, 1.0, &policy));
        assert!(is_keyframe(&Pose::from_translation(4.0, 0.0, 0.0), &i, 0.0, &policy));
        assert!(is_keyframe(&Pose::from_xyz_yaw(0.0, 0.0, 0.0, 0.3), &i, 0.0, &policy));
        assert!(is_keyframe(&i, &i, 11.0, &policy));
    }

    fn keyframe(id: usize, x: f64, descriptor: IscDescriptor) -> Keyframe {
        Keyframe {
            id,
            frame_index: id,
            pose: Pose::from_translation(x, 0.0, 0.0),
            features: FeatureSet::default(),
            descriptor,
            timestamp: id as f64,
        }
    }

    #[test]
    fn detection_respects_exclusion_and_radius() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = random_descriptor(&mut rng, 1.0);
        let params = LoopParams {
            exclusion: 5,
            ..Default::default()
        };
        let current = keyframe(10, 0.0, d.clone());
        assert!(detect_loop(&current, &[], &params, None, None).is_none());
        let recent: Vec<_> = (6..10).map(|i| keyframe(i, 0.0, d.clone())).collect();
        assert!(detect_loop(&current, &recent, &params, None, None).is_none());
        let far = vec![keyframe(0, 100.0, d.clone())];
        assert!(detect_loop(&current, &far, &params, None, None).is_none());
        let near = vec![keyframe(0, 100.0, d.clone()), keyframe(2, 1.0, d.shifted(3))];
        let hit = detect_loop(&current, &near, &params, None, None).unwrap();
        assert_eq!((hit.id, hit.index, hit.shift), (2, 1, 57));
    }

    #[test]
    fn yaw_of_shift() {
        assert_abs_diff_eq!(shift_to_yaw(6, 60), 36f64.to_radians(), epsilon = 1e-12);
        assert_abs_diff_eq!(shift_to_yaw(54, 60), -36f64.to_radians(), epsilon = 1e-12);
    }
}
