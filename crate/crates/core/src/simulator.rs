//! Ray-cast LiDAR simulator over scenes of plane patches and boxes.
//!
//! Returned intensity follows `I = η_all ρ cos α / R²` with `η_all = 1`, so a
//! head-on return from a `ρ = 1` surface at 1 m reads 1.0. With
//! `range_precalibrated` set the `R²` factor is removed, as range-compensating
//! sensors do.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geometry::{Point, Pose, Scan};
use crate::par::par_map_range;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("no ray hit any surface (frame {frame})")]
    NoReturns { frame: usize },
    #[error("scene line {line}: {message}")]
    SceneParse { line: usize, message: String },
}

/// Alternating reflectivity bands: the first half of each period reads `a`,
/// the second half `b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stripes {
    pub period: f64,
    pub a: f64,
    pub b: f64,
}

impl Stripes {
    fn at(&self, s: f64) -> f64 {
        if (s / self.period).rem_euclid(1.0) < 0.5 {
            self.a
        } else {
            self.b
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Parallelogram `corner + a u + b v` for `a, b ∈ [0, 1]`.
    Plane {
        corner: Vector3<f64>,
        u: Vector3<f64>,
        v: Vector3<f64>,
    },
    /// Solid axis-aligned box.
    Box { min: Vector3<f64>, max: Vector3<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Surface {
    pub shape: Shape,
    pub reflectivity: f64,
    /// Bands along `u` for planes and along world z for boxes.
    pub stripes: Option<Stripes>,
}

impl Surface {
    pub fn plane(corner: Vector3<f64>, u: Vector3<f64>, v: Vector3<f64>, reflectivity: f64) -> Self {
        Self {
            shape: Shape::Plane { corner, u, v },
            reflectivity,
            stripes: None,
        }
    }

    pub fn cuboid(min: Vector3<f64>, max: Vector3<f64>, reflectivity: f64) -> Self {
        Self {
            shape: Shape::Box { min, max },
            reflectivity,
            stripes: None,
        }
    }

    pub fn striped(mut self, period: f64, a: f64, b: f64) -> Self {
        self.stripes = Some(Stripes { period, a, b });
        self
    }

    fn reflectivity_at(&self, q: &Vector3<f64>) -> f64 {
        let Some(st) = self.stripes else {
            return self.reflectivity;
        };
        match self.shape {
            Shape::Plane { corner, u, .. } => st.at((q - corner).dot(&u.normalize())),
            Shape::Box { .. } => st.at(q.z),
        }
    }

    /// Nearest hit along the ray `o + s d` (unit `d`) with `s > 0`, as
    /// `(s, unit normal)`.
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        match self.shape {
            Shape::Plane { corner, u, v } => {
                let n = u.cross(&v);
                let denom = d.dot(&n);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let s = (corner - o).dot(&n) / denom;
                if s <= 1e-9 {
                    return None;
                }
                let w = o + d * s - corner;
                let (uu, uv, vv) = (u.dot(&u), u.dot(&v), v.dot(&v));
                let (wu, wv) = (w.dot(&u), w.dot(&v));
                let det = uu * vv - uv * uv;
                let a = (wu * vv - wv * uv) / det;
                let b = (wv * uu - wu * uv) / det;
                let tol = 1e-12;
                if a < -tol || a > 1.0 + tol || b < -tol || b > 1.0 + tol {
                    return None;
                }
                Some((s, n.normalize()))
            }
            Shape::Box { min, max } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut near_axis = 0;
                let mut far_axis = 0;
                for a in 0..3 {
                    if d[a].abs() < 1e-15 {
                        if o[a] < min[a] || o[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let t1 = (min[a] - o[a]) / d[a];
                    let t2 = (max[a] - o[a]) / d[a];
                    let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
                    if lo > t_near {
                        t_near = lo;
                        near_axis = a;
                    }
                    if hi < t_far {
                        t_far = hi;
                        far_axis = a;
                    }
                }
                if t_near > t_far {
                    return None;
                }
                let (s, axis) = if t_near > 1e-9 {
                    (t_near, near_axis)
                } else if t_far > 1e-9 {
                    (t_far, far_axis)
                } else {
                    return None;
                };
                let mut n = Vector3::zeros();
                n[axis] = 1.0;
                Some((s, n))
            }
        }
    }

    fn extent(&self) -> (Vector3<f64>, Vector3<f64>) {
        match self.shape {
            Shape::Plane { corner, u, v } => {
                let pts = [corner, corner + u, corner + v, corner + u + v];
                let mut lo = pts[0];
                let mut hi = pts[0];
                for p in &pts[1..] {
                    lo = lo.inf(p);
                    hi = hi.sup(p);
                }
                (lo, hi)
            }
            Shape::Box { min, max } => (min, max),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub surfaces: Vec<Surface>,
}

impl Scene {
    pub fn new(surfaces: Vec<Surface>) -> Self {
        Self { surfaces }
    }

    /// Axis-aligned extent of all surfaces.
    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for s in &self.surfaces {
            let (a, b) = s.extent();
            lo = lo.inf(&a);
            hi = hi.sup(&b);
        }
        (lo, hi)
    }

    pub fn push(&mut self, surface: Surface) {
        self.surfaces.push(surface);
    }

    /// Adds the six inward walls of an axis-aligned room.
    pub fn add_room(&mut self, min: Vector3<f64>, max: Vector3<f64>, reflectivity: f64) {
        let e = max - min;
        let (ex, ey, ez) = (
            Vector3::new(e.x, 0.0, 0.0),
            Vector3::new(0.0, e.y, 0.0),
            Vector3::new(0.0, 0.0, e.z),
        );
        let top = Vector3::new(min.x, min.y, max.z);
        let east = Vector3::new(max.x, min.y, min.z);
        let north = Vector3::new(min.x, max.y, min.z);
        for (corner, u, v) in [
            (min, ex, ey),
            (top, ex, ey),
            (min, ex, ez),
            (north, ex, ez),
            (min, ey, ez),
            (east, ey, ez),
        ] {
            self.surfaces.push(Surface::plane(corner, u, v, reflectivity));
        }
    }

    /// Closest hit along a ray: `(range, unit normal, reflectivity)`.
    pub fn cast(&self, o: &Vector3<f64>, d: &Vector3<f64>, max_range: f64) -> Option<(f64, Vector3<f64>, f64)> {
        let mut best: Option<(f64, Vector3<f64>, usize)> = None;
        for (i, s) in self.surfaces.iter().enumerate() {
            if let Some((t, n)) = s.intersect(o, d) {
                if t <= max_range && best.is_none_or(|b| t < b.0) {
                    best = Some((t, n, i));
                }
            }
        }
        best.map(|(t, n, i)| {
            let q = o + d * t;
            (t, n, self.surfaces[i].reflectivity_at(&q))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorModel {
    pub vertical_beams: usize,
    pub vertical_fov_deg: f64,
    pub horizontal_steps: usize,
    pub max_range: f64,
    pub range_noise_sigma: f64,
    pub intensity_noise_sigma: f64,
    pub range_precalibrated: bool,
}

impl Default for SensorModel {
    fn default() -> Self {
        Self::vlp16()
    }
}

impl SensorModel {
    /// 16 beams over ±15°, 1800 steps per revolution.
    pub fn vlp16() -> Self {
        Self {
            vertical_beams: 16,
            vertical_fov_deg: 30.0,
            horizontal_steps: 1800,
            max_range: 100.0,
            range_noise_sigma: 0.01,
            intensity_noise_sigma: 0.02,
            range_precalibrated: true,
        }
    }

    /// 64 beams over 26.9°, KITTI-like density.
    pub fn hdl64() -> Self {
        Self {
            vertical_beams: 64,
            vertical_fov_deg: 26.9,
            horizontal_steps: 2048,
            max_range: 120.0,
            ..Self::vlp16()
        }
    }

    pub fn noiseless(mut self) -> Self {
        self.range_noise_sigma = 0.0;
        self.intensity_noise_sigma = 0.0;
        self
    }

    pub fn elevation(&self, beam: usize) -> f64 {
        if self.vertical_beams <= 1 {
            return 0.0;
        }
        let fov = self.vertical_fov_deg.to_radians();
        -fov / 2.0 + beam as f64 * fov / (self.vertical_beams - 1) as f64
    }

    pub fn azimuth(&self, step: usize) -> f64 {
        -PI + step as f64 * 2.0 * PI / self.horizontal_steps as f64
    }

    /// Unit ray direction in the sensor frame.
    pub fn direction(&self, beam: usize, step: usize) -> Vector3<f64> {
        let (el, az) = (self.elevation(beam), self.azimuth(step));
        Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
    }
}

/// Renders one sweep from `pose`. Points are expressed in the sensor frame,
/// ordered beam by beam, and carry their beam index as ring.
pub fn render_scan(scene: &Scene, pose: &Pose, sensor: &SensorModel, seed: u64) -> Result<Scan, SimError> {
    let origin = pose.translation;
    let range_noise = Normal::new(0.0, sensor.range_noise_sigma).expect("sigma is finite");
    let intensity_noise = Normal::new(0.0, sensor.intensity_noise_sigma).expect("sigma is finite");
    let rows: Vec<Vec<Point>> = par_map_range(sensor.vertical_beams, |beam| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(beam as u64);
        let mut row = Vec::with_capacity(sensor.horizontal_steps);
        for step in 0..sensor.horizontal_steps {
            let d_local = sensor.direction(beam, step);
            let d = pose.rotation * d_local;
            let Some((range, normal, rho)) = scene.cast(&origin, &d, sensor.max_range) else {
                continue;
            };
            let cos_a = d.dot(&normal).abs();
            let mut intensity = rho * cos_a;
            if !sensor.range_precalibrated {
                intensity /= range * range;
            }
            let mut r = range;
            if sensor.range_noise_sigma > 0.0 {
                r += range_noise.sample(&mut rng);
            }
            if sensor.intensity_noise_sigma > 0.0 {
                intensity += intensity_noise.sample(&mut rng);
            }
            let p = d_local * r;
            row.push(Point::new(p.x, p.y, p.z, intensity.max(0.0)).with_ring(beam as u16));
        }
        row
    });
    let points: Vec<Point> = rows.into_iter().flatten().collect();
    if points.is_empty() {
        return Err(SimError::NoReturns { frame: 0 });
    }
    Ok(Scan::new(points, 0.0, 0))
}

/// Per-frame seed derived from a sequence seed.
pub fn frame_seed(seed: u64, frame: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (frame as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Renders every pose of a trajectory; frame `k` gets timestamp `k · dt`.
pub fn generate_sequence(
    scene: &Scene,
    trajectory: &[Pose],
    sensor: &SensorModel,
    seed: u64,
    dt: f64,
) -> Result<(Vec<Scan>, Vec<Pose>), SimError> {
    let mut scans = Vec::with_capacity(trajectory.len());
    for (k, pose) in trajectory.iter().enumerate() {
        let mut scan = render_scan(scene, pose, sensor, frame_seed(seed, k))
            .map_err(|_| SimError::NoReturns { frame: k })?;
        scan.frame_index = k;
        scan.timestamp = k as f64 * dt;
        scans.push(scan);
    }
    Ok((scans, trajectory.to_vec()))
}

fn parse_vec3(s: &str) -> Option<Vector3<f64>> {
    let v: Vec<f64> = s.split(',').map(|x| x.trim().parse().ok()).collect::<Option<_>>()?;
    (v.len() == 3).then(|| Vector3::new(v[0], v[1], v[2]))
}

/// Parses a scene description. One surface per line:
///
/// ```text
/// # comment
/// plane corner=0,0,0 u=10,0,0 v=0,0,3 reflectivity=0.6 stripe_period=2 stripe_reflectivity=0.2
/// box min=1,1,0 max=2,2,3 reflectivity=0.4
/// room min=-10,-5,-1 max=10,5,3 reflectivity=0.5
/// ```
///
/// `stripe_reflectivity` is the second band; the first band uses `reflectivity`.
pub fn parse_scene(text: &str) -> Result<Scene, SimError> {
    let mut scene = Scene::new(Vec::new());
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| SimError::SceneParse { line: n + 1, message };
        let mut tokens = line.split_whitespace();
        let kind = tokens.next().unwrap_or_default();
        let mut fields = std::collections::HashMap::new();
        for tok in tokens {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got `{tok}`")))?;
            fields.insert(k, v);
        }
        let vec = |key: &str| {
            fields
                .get(key)
                .and_then(|v| parse_vec3(v))
                .ok_or_else(|| err(format!("missing or invalid `{key}`")))
        };
        let num = |key: &str| -> Result<Option<f64>, SimError> {
            fields
                .get(key)
                .map(|v| v.parse::<f64>().map_err(|_| err(format!("invalid number for `{key}`"))))
                .transpose()
        };
        let reflectivity = num("reflectivity")?.unwrap_or(0.5);
        if reflectivity <= 0.0 {
            return Err(err("reflectivity must be positive".into()));
        }
        let stripes = match (num("stripe_period")?, num("stripe_reflectivity")?) {
            (Some(p), Some(b)) if p > 0.0 && b > 0.0 => Some(Stripes {
                period: p,
                a: reflectivity,
                b,
            }),
            (None, None) => None,
            _ => return Err(err("stripes need a positive stripe_period and stripe_reflectivity".into())),
        };
        match kind {
            "plane" => {
                let mut s = Surface::plane(vec("corner")?, vec("u")?, vec("v")?, reflectivity);
                if s.extent().0 == s.extent().1 {
                    return Err(err("plane has zero extent".into()));
                }
                s.stripes = stripes;
                scene.push(s);
            }
            "box" => {
                let mut s = Surface::cuboid(vec("min")?, vec("max")?, reflectivity);
                s.stripes = stripes;
                scene.push(s);
            }
            "room" => {
                let start = scene.surfaces.len();
                scene.add_room(vec("min")?, vec("max")?, reflectivity);
                for s in &mut scene.surfaces[start..] {
                    s.stripes = stripes;
                }
            }
            other => return Err(err(format!("unknown surface type `{other}`"))),
        }
    }
    Ok(scene)
}

/// Preset scenes and trajectories used by tests, the CLI and the demo.
pub mod presets {
    use super::*;
    use rand::Rng;

    fn v(x: f64, y: f64, z: f64) -> Vector3<f64> {
        Vector3::new(x, y, z)
    }

    /// 24 × 16 × 4 m room with pillars, cabinets and walls of different
    /// reflectivity. Sensor height is z = 0.
    pub fn room() -> Scene {
        let mut s = Scene::new(Vec::new());
        let (lo, hi) = (v(-12.0, -8.0, -1.5), v(12.0, 8.0, 2.5));
        s.push(Surface::plane(lo, v(24.0, 0.0, 0.0), v(0.0, 16.0, 0.0), 0.35));
        s.push(Surface::plane(v(lo.x, lo.y, hi.z), v(24.0, 0.0, 0.0), v(0.0, 16.0, 0.0), 0.6));
        s.push(Surface::plane(lo, v(24.0, 0.0, 0.0), v(0.0, 0.0, 4.0), 0.5).striped(3.0, 0.5, 0.8));
        s.push(Surface::plane(v(lo.x, hi.y, lo.z), v(24.0, 0.0, 0.0), v(0.0, 0.0, 4.0), 0.7));
        s.push(Surface::plane(lo, v(0.0, 16.0, 0.0), v(0.0, 0.0, 4.0), 0.45));
        s.push(Surface::plane(v(hi.x, lo.y, lo.z), v(0.0, 16.0, 0.0), v(0.0, 0.0, 4.0), 0.55).striped(2.0, 0.55, 0.25));
        for (x, y, r) in [(-6.0, -3.0, 0.3), (5.0, 4.0, 0.9), (7.5, -4.5, 0.6), (-8.0, 5.0, 0.4)] {
            s.push(Surface::cuboid(v(x - 0.3, y - 0.3, lo.z), v(x + 0.3, y + 0.3, hi.z), r));
        }
        s.push(Surface::cuboid(v(-2.0, 6.5, lo.z), v(1.5, 8.0, 0.6), 0.25));
        s.push(Surface::cuboid(v(10.0, -1.0, lo.z), v(12.0, 2.0, 1.0), 0.8));
        s
    }

    /// Straight corridor of `length` along x, 3 m wide, with reflectivity
    /// stripes of `period` on both walls. Only the walls, floor and ceiling
    /// exist, so geometry does not constrain motion along x.
    pub fn corridor(length: f64, period: f64) -> Scene {
        let mut s = Scene::new(Vec::new());
        let x0 = -length / 2.0;
        let (w, z0, h) = (1.5, -1.2, 3.0);
        let along = v(length, 0.0, 0.0);
        s.push(Surface::plane(v(x0, -w, z0), along, v(0.0, 2.0 * w, 0.0), 0.4));
        s.push(Surface::plane(v(x0, -w, z0 + h), along, v(0.0, 2.0 * w, 0.0), 0.5));
        s.push(Surface::plane(v(x0, -w, z0), along, v(0.0, 0.0, h), 0.85).striped(period, 0.85, 0.2));
        s.push(Surface::plane(v(x0, w, z0), along, v(0.0, 0.0, h), 0.2).striped(period, 0.2, 0.85));
        s
    }

    /// Square ring corridor around a solid central block, for a 20 m square
    /// loop at `x, y = ±10`.
    pub fn loop_block() -> Scene {
        let mut s = Scene::new(Vec::new());
        let (z0, z1) = (-1.5, 2.5);
        s.add_room(v(-14.0, -14.0, z0), v(14.0, 14.0, z1), 0.5);
        // distinct wall reflectivities so places differ in intensity
        let refl = [0.35, 0.6, 0.3, 0.75, 0.45, 0.55];
        for (surface, r) in s.surfaces.iter_mut().zip(refl) {
            surface.reflectivity = r;
        }
        s.surfaces[2].stripes = Some(Stripes { period: 4.0, a: 0.3, b: 0.8 });
        s.surfaces[4].stripes = Some(Stripes { period: 2.5, a: 0.45, b: 0.15 });
        s.push(Surface::cuboid(v(-6.5, -6.5, z0), v(6.5, 6.5, z1), 0.4).striped(1.5, 0.4, 0.7));
        let pillars = [
            (-3.0, -12.0, 0.9),
            (4.0, -8.5, 0.25),
            (12.0, -2.0, 0.7),
            (8.5, 5.0, 0.5),
            (1.0, 12.5, 0.3),
            (-5.5, 8.5, 0.85),
            (-12.5, 3.0, 0.6),
            (-8.5, -6.0, 0.2),
            (12.5, 12.5, 0.9),
            (-12.0, -12.5, 0.65),
        ];
        for (x, y, r) in pillars {
            s.push(Surface::cuboid(v(x - 0.25, y - 0.25, z0), v(x + 0.25, y + 0.25, z1), r));
        }
        s.push(Surface::cuboid(v(10.5, -13.8, z0), v(13.8, -11.5, 0.5), 0.85));
        s.push(Surface::cuboid(v(-13.8, 11.0, z0), v(-11.0, 13.8, 1.0), 0.3));
        s
    }

    /// Random furnished room unrelated to the other presets.
    pub fn unrelated_room(seed: u64) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hx = rng.random_range(6.0..16.0);
        let hy = rng.random_range(4.0..12.0);
        let mut s = Scene::new(Vec::new());
        s.add_room(v(-hx, -hy, -1.5), v(hx, hy, rng.random_range(1.5..4.0)), 0.5);
        for surface in &mut s.surfaces {
            surface.reflectivity = rng.random_range(0.1..0.95);
            if rng.random_bool(0.4) {
                let b = rng.random_range(0.1..0.95);
                surface.stripes = Some(Stripes {
                    period: rng.random_range(0.5..5.0),
                    a: surface.reflectivity,
                    b,
                });
            }
        }
        for _ in 0..rng.random_range(3..10) {
            let c = v(rng.random_range(-hx..hx), rng.random_range(-hy..hy), 0.0);
            let half = v(rng.random_range(0.2..2.0), rng.random_range(0.2..2.0), 0.0);
            let top = rng.random_range(-0.5..2.5);
            if c.x.abs() < half.x + 1.0 && c.y.abs() < half.y + 1.0 {
                continue;
            }
            s.push(Surface::cuboid(
                v(c.x - half.x, c.y - half.y, -1.5),
                v(c.x + half.x, c.y + half.y, top),
                rng.random_range(0.1..0.95),
            ));
        }
        s
    }

    /// Closed square loop with side `side` starting at `start` heading +x,
    /// turning left in place at each corner. The last pose equals the first.
    pub fn square_loop(start: Vector3<f64>, side: f64, step: f64, turn_steps: usize) -> Vec<Pose> {
        let mut poses = Vec::new();
        let mut pos = start;
        let legs = (side / step).round() as usize;
        for leg in 0..4 {
            let yaw = leg as f64 * PI / 2.0;
            let dir = v(yaw.cos(), yaw.sin(), 0.0);
            for _ in 0..legs {
                poses.push(Pose::from_xyz_yaw(pos.x, pos.y, pos.z, yaw));
                pos += dir * step;
            }
            pos = start + rotate_offsets(leg, side);
            for t in 0..turn_steps {
                let a = yaw + (t as f64) * (PI / 2.0) / turn_steps as f64;
                poses.push(Pose::from_xyz_yaw(pos.x, pos.y, pos.z, a));
            }
        }
        poses.push(Pose::from_xyz_yaw(start.x, start.y, start.z, 0.0));
        poses
    }

    fn rotate_offsets(leg: usize, side: f64) -> Vector3<f64> {
        match leg {
            0 => v(side, 0.0, 0.0),
            1 => v(side, side, 0.0),
            2 => v(0.0, side, 0.0),
            _ => v(0.0, 0.0, 0.0),
        }
    }

    /// Straight run along +x with a speed that oscillates between
    /// `min_step` and `max_step` per frame.
    pub fn varying_speed_line(frames: usize, min_step: f64, max_step: f64) -> Vec<Pose> {
        let mut x = 0.0;
        (0..frames)
            .map(|k| {
                let p = Pose::from_translation(x, 0.0, 0.0);
                let phase = (k as f64 * 0.7).sin() * 0.5 + 0.5;
                x += min_step + (max_step - min_step) * phase;
                p
            })
            .collect()
    }

    /// `frames` poses advancing by `step` along the heading and turning by
    /// `yaw_step` per frame.
    pub fn arc(start: Pose, frames: usize, step: f64, yaw_step: f64) -> Vec<Pose> {
        let motion = Pose::from_xyz_yaw(step, 0.0, 0.0, yaw_step);
        let mut p = start;
        (0..frames)
            .map(|_| {
                let out = p;
                p = p * motion;
                out
            })
            .collect()
    }
}
