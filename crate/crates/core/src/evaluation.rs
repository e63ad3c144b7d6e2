//! KITTI-style relative trajectory errors.

use std::fmt::Write as _;

use thiserror::Error;

use crate::geometry::Pose;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("trajectories differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("trajectory needs at least two poses")]
    TooFewPoses,
    #[error("trajectory is {length:.1} m long, shorter than the {required:.1} m segment")]
    TrajectoryTooShort { length: f64, required: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPair {
    pub estimated: Vec<Pose>,
    pub ground_truth: Vec<Pose>,
    /// Cumulative ground-truth path length at each frame.
    pub path_length: Vec<f64>,
}

impl TrajectoryPair {
    pub fn new(estimated: Vec<Pose>, ground_truth: Vec<Pose>) -> Result<Self, EvalError> {
        if estimated.len() != ground_truth.len() {
            return Err(EvalError::LengthMismatch(estimated.len(), ground_truth.len()));
        }
        if estimated.len() < 2 {
            return Err(EvalError::TooFewPoses);
        }
        let mut path_length = vec![0.0];
        for w in ground_truth.windows(2) {
            let d = (w[1].translation - w[0].translation).norm();
            path_length.push(path_length.last().unwrap() + d);
        }
        Ok(Self {
            estimated,
            ground_truth,
            path_length,
        })
    }

    pub fn len(&self) -> usize {
        self.estimated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.estimated.is_empty()
    }

    pub fn total_length(&self) -> f64 {
        *self.path_length.last().unwrap_or(&0.0)
    }
}

/// Rotation angle from the trace of the rotation matrix.
pub fn trace_angle(p: &Pose) -> f64 {
    let r = p.rotation_matrix();
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// `E = T̂_j T̂_i⁻¹ T_i T_j⁻¹`, returned as (translation norm, rotation angle).
///
/// With `A = T̂_j T̂_i⁻¹` and `B = T_j T_i⁻¹` this evaluates `|R_Aᵀ t_A − R_Bᵀ t_B|`
/// and the rotation angle between `R_A` and `R_B`, which equal the norm and
/// angle of `A B⁻¹` but vanish exactly when the estimate matches the ground
/// truth. The angle is the one [`trace_angle`] gives, taken from the
/// quaternion chord so it keeps full precision near zero.
pub fn pair_error(i: usize, j: usize, pair: &TrajectoryPair) -> (f64, f64) {
    let (est, gt) = (&pair.estimated, &pair.ground_truth);
    let a = est[j] * est[i].inverse();
    let b = gt[j] * gt[i].inverse();
    let t = a.rotation.inverse_transform_vector(&a.translation)
        - b.rotation.inverse_transform_vector(&b.translation);
    let qa = a.rotation.quaternion().coords;
    let mut qb = b.rotation.quaternion().coords;
    if qa.dot(&qb) < 0.0 {
        qb = -qb;
    }
    let angle = 4.0 * (qa - qb).norm().atan2((qa + qb).norm());
    (t.norm(), angle)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentError {
    pub length: f64,
    pub translation: f64,
    pub rotation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub ate_percent: f64,
    pub are_deg_per_m: f64,
    pub per_segment: Vec<SegmentError>,
}

impl ErrorReport {
    fn from_segments(per_segment: Vec<SegmentError>) -> Self {
        let n = per_segment.len().max(1) as f64;
        let ate = per_segment.iter().map(|s| s.translation / s.length).sum::<f64>() / n * 100.0;
        let are = per_segment
            .iter()
            .map(|s| s.rotation.to_degrees() / s.length)
            .sum::<f64>()
            / n;
        Self {
            ate_percent: ate,
            are_deg_per_m: are,
            per_segment,
        }
    }

    /// One row per segment length: mean errors over the segments of that
    /// length.
    pub fn to_csv(&self) -> String {
        let mut lengths: Vec<f64> = self.per_segment.iter().map(|s| s.length).collect();
        lengths.sort_by(f64::total_cmp);
        lengths.dedup();
        let mut out = String::from("segment_length_m,ate_percent,are_deg_per_m\n");
        for len in lengths {
            let group: Vec<_> = self.per_segment.iter().filter(|s| s.length == len).collect();
            let n = group.len() as f64;
            let t = group.iter().map(|s| s.translation / s.length).sum::<f64>() / n * 100.0;
            let r = group.iter().map(|s| s.rotation.to_degrees() / s.length).sum::<f64>() / n;
            let _ = writeln!(out, "{len},{t},{r}");
        }
        let _ = writeln!(out, "all,{},{}", self.ate_percent, self.are_deg_per_m);
        out
    }

    pub fn summary(&self) -> String {
        format!("ATE {:.4}% ARE {:.6} deg/m", self.ate_percent, self.are_deg_per_m)
    }
}

pub const KITTI_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];
pub const KITTI_STRIDE: usize = 10;

/// Segments starting every `stride` frames; each ends at the first frame whose
/// ground-truth path length from the start reaches the segment length.
pub fn evaluate(pair: &TrajectoryPair, lengths: &[f64], stride: usize) -> Result<ErrorReport, EvalError> {
    let shortest = lengths.iter().cloned().fold(f64::INFINITY, f64::min);
    if pair.total_length() < shortest {
        return Err(EvalError::TrajectoryTooShort {
            length: pair.total_length(),
            required: shortest,
        });
    }
    let dist = &pair.path_length;
    let mut segments = Vec::new();
    for i in (0..pair.len()).step_by(stride.max(1)) {
        for &len in lengths {
            let target = dist[i] + len;
            let Some(j) = (i..pair.len()).find(|&j| dist[j] >= target) else {
                continue;
            };
            let (t, r) = pair_error(i, j, pair);
            segments.push(SegmentError {
                length: len,
                translation: t,
                rotation: r,
            });
        }
    }
    Ok(ErrorReport::from_segments(segments))
}

pub fn evaluate_kitti(pair: &TrajectoryPair) -> Result<ErrorReport, EvalError> {
    evaluate(pair, &KITTI_LENGTHS, KITTI_STRIDE)
}

/// Segments `(i, i + k)` for every frame gap `k`, normalized by the
/// ground-truth path length between them. Pairs that did not move are skipped.
pub fn evaluate_frame_gaps(pair: &TrajectoryPair, gaps: &[usize]) -> Result<ErrorReport, EvalError> {
    let mut segments = Vec::new();
    for &k in gaps {
        for i in 0..pair.len().saturating_sub(k) {
            let j = i + k;
            let length = pair.path_length[j] - pair.path_length[i];
            if length < 1e-6 {
                continue;
            }
            let (t, r) = pair_error(i, j, pair);
            segments.push(SegmentError {
                length,
                translation: t,
                rotation: r,
            });
        }
    }
    if segments.is_empty() {
        return Err(EvalError::TrajectoryTooShort {
            length: pair.total_length(),
            required: f64::MIN_POSITIVE,
        });
    }
    Ok(ErrorReport::from_segments(segments))
}

/// KITTI segments when the run is long enough, frame gaps {1, 10, 50}
/// otherwise.
pub fn evaluate_auto(pair: &TrajectoryPair) -> Result<ErrorReport, EvalError> {
    if pair.total_length() >= KITTI_LENGTHS[0] {
        evaluate_kitti(pair)
    } else {
        evaluate_frame_gaps(pair, &[1, 10, 50])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line(n: usize, step: f64) -> Vec<Pose> {
        (0..n).map(|i| Pose::from_translation(i as f64 * step, 0.0, 0.0)).collect()
    }

    #[test]
    fn perfect_estimate() {
        let gt = line(1000, 1.0);
        let pair = TrajectoryPair::new(gt.clone(), gt).unwrap();
        assert_eq!(pair_error(3, 70, &pair), (0.0, 0.0));
        let r = evaluate_kitti(&pair).unwrap();
        assert_eq!((r.ate_percent, r.are_deg_per_m), (0.0, 0.0));

        let turning: Vec<Pose> = (0..1000).map(|i| Pose::from_xyz_yaw(i as f64, 0.1, 0.0, 0.01 * i as f64)).collect();
        let r = evaluate_kitti(&TrajectoryPair::new(turning.clone(), turning).unwrap()).unwrap();
        assert_eq!((r.ate_percent, r.are_deg_per_m), (0.0, 0.0));
    }

    #[test]
    fn too_short() {
        let gt = line(11, 1.0);
        let pair = TrajectoryPair::new(gt.clone(), gt).unwrap();
        assert!(matches!(evaluate(&pair, &[800.0], 10), Err(EvalError::TrajectoryTooShort { .. })));
    }

    #[test]
    fn under_translation() {
        let gt = vec![Pose::identity(), Pose::from_translation(10.0, 0.0, 0.0)];
        let est = vec![Pose::identity(), Pose::from_translation(9.9, 0.0, 0.0)];
        let pair = TrajectoryPair::new(est, gt).unwrap();
        let (t, r) = pair_error(0, 1, &pair);
        assert_abs_diff_eq!(t, 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(r, 0.0);
    }

    #[test]
    fn proportional_drift_is_one_percent() {
        let gt = line(1000, 1.0);
        let est = line(1000, 1.01);
        let pair = TrajectoryPair::new(est, gt).unwrap();
        let r = evaluate_kitti(&pair).unwrap();
        assert_abs_diff_eq!(r.ate_percent, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn composition_oracle_with_global_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = Pose::from_xyz_yaw(3.0, -2.0, 0.5, 0.7) * Pose::from_axis_angle(&Vector3::x(), 0.3);
        let gt: Vec<Pose> = (0..20)
            .map(|_| Pose::from_xyz_yaw(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 0.0, rng.random_range(-3.0..3.0)))
            .collect();
        let est: Vec<Pose> = gt.iter().map(|p| g * *p).collect();
        let pair = TrajectoryPair::new(est.clone(), gt.clone()).unwrap();
        for (i, j) in [(0, 5), (3, 19), (7, 8)] {
            let m = est[j].to_homogeneous()
                * est[i].to_homogeneous().try_inverse().unwrap()
                * gt[i].to_homogeneous()
                * gt[j].to_homogeneous().try_inverse().unwrap();
            let (t, r) = pair_error(i, j, &pair);
            let oracle_t = Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]).norm();
            let oracle_r = ((m.fixed_view::<3, 3>(0, 0).trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
            assert_abs_diff_eq!(t, oracle_t, epsilon = 1e-9);
            assert_abs_diff_eq!(r, oracle_r, epsilon = 1e-7);
        }
    }

    #[test]
    fn frame_gaps_skip_stationary_pairs() {
        let mut gt = line(5, 1.0);
        gt.push(*gt.last().unwrap());
        let pair = TrajectoryPair::new(gt.clone(), gt).unwrap();
        let r = evaluate_frame_gaps(&pair, &[1]).unwrap();
        assert_eq!(r.per_segment.len(), 4);
    }

    #[test]
    fn csv_has_header_and_summary() {
        let gt = line(300, 1.0);
        let pair = TrajectoryPair::new(line(300, 1.01), gt).unwrap();
        let csv = evaluate(&pair, &[100.0, 200.0], 10).unwrap().to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "segment_length_m,ate_percent,are_deg_per_m");
        assert!(lines[1].starts_with("100,"));
        assert!(lines.last().unwrap().starts_with("all,"));
    }
}
