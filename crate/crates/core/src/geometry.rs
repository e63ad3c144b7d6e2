//! Rigid-body poses and the point/scan types shared by the whole pipeline.

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector3, Vector6};

/// Rigid transform in SE(3), mapping points from a body frame into a parent frame.
///
/// The rotation is kept as a unit quaternion and renormalized whenever it is
/// updated by a solver step, so repeated composition does not drift off the
/// manifold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::new(UnitQuaternion::identity(), Vector3::new(x, y, z))
    }

    /// Rotation of `angle` radians about `axis` (need not be normalized), zero translation.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        Self::new(
            UnitQuaternion::from_scaled_axis(axis.normalize() * angle),
            Vector3::zeros(),
        )
    }

    /// Planar pose: position (x, y, z) and heading `yaw` about +z.
    pub fn from_xyz_yaw(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Self::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
            Vector3::new(x, y, z),
        )
    }

    /// Builds a pose from a rotation matrix that is assumed orthonormal.
    pub fn from_rotation_matrix(rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_matrix_unchecked(*rotation);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        *self.rotation.to_rotation_matrix().matrix()
    }

    /// Homogeneous 4x4 form.
    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    /// R·p + t.
    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Angle of the axis-angle decomposition of the rotation part, in [0, π].
    pub fn rotation_angle(&self) -> f64 {
        let q = self.rotation.quaternion();
        let angle = 2.0 * q.imag().norm().atan2(q.w.abs());
        angle.min(PI)
    }

    /// Heading about +z (atan2 of the rotated x axis).
    pub fn yaw(&self) -> f64 {
        let x = self.rotation * Vector3::x();
        x.y.atan2(x.x)
    }

    /// Solver update in the local parameterization `[δθ, δt]`: the rotation is
    /// left-multiplied by `exp(δθ)` and the translation shifted by `δt`.
    ///
    /// Under this update the derivative of `apply(p)` is `[-(R p)^, I]`.
    pub fn retract(&self, delta: &Vector6<f64>) -> Pose {
        let dr = UnitQuaternion::from_scaled_axis(Vector3::new(delta[0], delta[1], delta[2]));
        let mut rotation = dr * self.rotation;
        rotation.renormalize();
        Pose {
            rotation,
            translation: self.translation + Vector3::new(delta[3], delta[4], delta[5]),
        }
    }

    /// SE(3) exponential of a twist `[ω, v]`.
    pub fn exp(xi: &Vector6<f64>) -> Pose {
        let omega = Vector3::new(xi[0], xi[1], xi[2]);
        let v = Vector3::new(xi[3], xi[4], xi[5]);
        let rotation = UnitQuaternion::from_scaled_axis(omega);
        Pose {
            rotation,
            translation: left_jacobian_so3(&omega) * v,
        }
    }

    /// SE(3) logarithm as a twist `[ω, v]`; inverse of [`Pose::exp`].
    pub fn log(&self) -> Vector6<f64> {
        let omega = self.rotation.scaled_axis();
        let v = inverse_left_jacobian_so3(&omega) * self.translation;
        Vector6::new(omega.x, omega.y, omega.z, v.x, v.y, v.z)
    }

    /// Max absolute difference between the 3x4 matrices of two poses.
    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        let a = self.to_homogeneous();
        let b = other.to_homogeneous();
        (a - b).abs().max()
    }
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl Mul<&Pose> for &Pose {
    type Output = Pose;

    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn left_jacobian_so3(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let k = skew(omega);
    if theta < 1e-8 {
        return Matrix3::identity() + 0.5 * k + k * k / 6.0;
    }
    let t2 = theta * theta;
    Matrix3::identity()
        + (1.0 - theta.cos()) / t2 * k
        + (theta - theta.sin()) / (t2 * theta) * k * k
}

fn inverse_left_jacobian_so3(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let k = skew(omega);
    if theta < 1e-8 {
        return Matrix3::identity() - 0.5 * k + k * k / 12.0;
    }
    let half = 0.5 * theta;
    let coef = (1.0 - half * half.cos() / half.sin()) / (theta * theta);
    Matrix3::identity() - 0.5 * k + coef * k * k
}

/// A single LiDAR return.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    /// Position in the sensor frame, meters.
    pub position: Vector3<f64>,
    /// Raw intensity as reported by the sensor.
    pub intensity: f64,
    /// Incidence-corrected intensity; equals `intensity` until calibrated.
    pub calibrated_intensity: f64,
    /// Laser ring the point came from, when the sensor layout is known.
    pub ring: Option<u16>,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Self {
            position: Vector3::new(x, y, z),
            intensity,
            calibrated_intensity: intensity,
            ring: None,
        }
    }

    pub fn with_ring(mut self, ring: u16) -> Self {
        self.ring = Some(ring);
        self
    }

    pub fn range(&self) -> f64 {
        self.position.norm()
    }
}

/// One sweep of the sensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Scan {
    pub points: Vec<Point>,
    pub timestamp: f64,
    pub frame_index: usize,
}

impl Scan {
    pub fn new(points: Vec<Point>, timestamp: f64, frame_index: usize) -> Self {
        Self {
            points,
            timestamp,
            frame_index,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// True when every point carries a ring index.
    pub fn has_rings(&self) -> bool {
        !self.points.is_empty() && self.points.iter().all(|p| p.ring.is_some())
    }

    /// Copy of the scan with every position mapped through `pose`.
    pub fn transformed(&self, pose: &Pose) -> Scan {
        Scan {
            points: self
                .points
                .iter()
                .map(|p| Point {
                    position: pose.apply(&p.position),
                    ..*p
                })
                .collect(),
            ..*self
        }
    }

    /// Assigns ring indices to a scan stored ring-by-ring (KITTI layout): a new
    /// ring starts whenever the azimuth wraps from the positive to the negative
    /// half-plane. Already-ringed scans are left untouched.
    pub fn assign_rings_by_azimuth_wrap(&mut self) {
        if self.has_rings() {
            return;
        }
        let mut ring = 0u16;
        let mut prev: Option<f64> = None;
        for p in &mut self.points {
            let az = p.position.y.atan2(p.position.x);
            if let Some(prev_az) = prev {
                if prev_az > PI / 2.0 && az < -PI / 2.0 {
                    ring = ring.saturating_add(1);
                }
            }
            p.ring = Some(ring);
            prev = Some(az);
        }
    }
}
