//! Scan-to-map odometry: point-to-edge, point-to-plane and intensity
//! residuals minimized with Levenberg-Marquardt under a Huber kernel.

use nalgebra::{Matrix3, Matrix6, RowVector6, SymmetricEigen, Vector3, Vector6};
use thiserror::Error;

use crate::calibration::sorted_eigen;
use crate::features::FeatureSet;
use crate::geometry::Pose;
use crate::mapping::{MapState, VoxelIntensityMap};
use crate::par::par_map_range;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("edge correspondence points coincide")]
    DegenerateLine,
    #[error("plane correspondence points are collinear")]
    DegeneratePlane,
    #[error("only {found} geometric correspondences, need {needed}")]
    InsufficientCorrespondences { found: usize, needed: usize },
    #[error("cost kept increasing after repeated damping escalation")]
    SolverDiverged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TermKind {
    Edge,
    Plane,
    Intensity,
}

/// One linearized residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualTerm {
    pub kind: TermKind,
    pub value: f64,
    /// Derivative with respect to the `[δθ, δt]` increment of [`Pose::retract`].
    pub jacobian: RowVector6<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub max_iterations: usize,
    /// Stop once the increment norm falls below this.
    pub parameter_tolerance: f64,
    /// Initial Levenberg damping, relative to the largest diagonal entry.
    pub initial_damping: f64,
    /// Huber threshold for all residual kinds. With `adaptive_kernel` set this
    /// is an upper bound.
    pub robust_kernel_delta: f64,
    /// Shrinks the Huber threshold every iteration to `1.345 · 1.4826 ·
    /// median|r|` (floored at `1e-6`), with the median over plane terms for
    /// geometry and over intensity terms for intensity, and scales intensity
    /// weights by `min(1, (σ_plane / σ_intensity)²)` so `intensity_weight`
    /// applies to residuals in units of their own spread.
    pub adaptive_kernel: bool,
    pub intensity_weight: f64,
    /// Geometric correspondences farther than this from their model are dropped.
    pub correspondence_gate: f64,
    pub min_geometry_terms: usize,
    /// Directions of the normal matrix with eigenvalue below this fraction of
    /// the largest are not updated.
    pub observability_threshold: f64,
    /// Edge neighbourhoods (5 nearest map edges) must have a principal
    /// eigenvalue at least this multiple of the second one.
    pub edge_linearity_ratio: f64,
    /// Minimum sine of the angle at `p1` in a plane correspondence triangle.
    pub plane_min_sine: f64,
    /// Largest distance of any of the 5 nearest map points from the plane.
    pub plane_max_deviation: f64,
    /// `None` requires all 8 surrounding cells for an intensity term. `Some(s)`
    /// interpolates over the observed ones when they carry at least `s` of the
    /// trilinear weight.
    pub intensity_support: Option<f64>,
    /// Intensity terms whose residual exceeds this at association are dropped.
    pub intensity_gate: f64,
    /// Intensity terms read the map on the point's associated map plane and
    /// constrain motion along it only; points without a plane get no term.
    pub intensity_on_surface: bool,
    /// Horizontal angular step of the sensor, radians. Edge terms are
    /// weighted by `σ² / (σ² + (ρ·step)² / 12)` with `σ` the robust scale of
    /// the plane residuals and `ρ` the range of the feature point, which
    /// accounts for the azimuth quantization of sampled edges. `0` disables
    /// the weighting; it only applies with `adaptive_kernel`.
    pub edge_azimuth_step: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iterations: 30,
            parameter_tolerance: 1e-7,
            initial_damping: 1e-4,
            robust_kernel_delta: 0.5,
            adaptive_kernel: true,
            intensity_weight: 0.1,
            correspondence_gate: 1.0,
            min_geometry_terms: 20,
            observability_threshold: 1e-6,
            edge_linearity_ratio: 3.0,
            plane_min_sine: 0.2,
            plane_max_deviation: 0.05,
            intensity_support: Some(0.25),
            intensity_gate: 1.0,
            intensity_on_surface: true,
            edge_azimuth_step: 2.0 * std::f64::consts::PI / 1800.0,
        }
    }
}

/// Distance from `p` to the line through `p1` and `p2`.
pub fn edge_residual(
    p: &Vector3<f64>,
    p1: &Vector3<f64>,
    p2: &Vector3<f64>,
) -> Result<f64, MatchError> {
    let d = (p1 - p2).norm();
    if d < 1e-6 {
        return Err(MatchError::DegenerateLine);
    }
    Ok((p - p1).cross(&(p - p2)).norm() / d)
}

/// Signed distance from `p` to the plane through `p1`, `p2`, `p3`.
pub fn plane_residual(
    p: &Vector3<f64>,
    p1: &Vector3<f64>,
    p2: &Vector3<f64>,
    p3: &Vector3<f64>,
) -> Result<f64, MatchError> {
    let n = plane_normal(p1, p2, p3)?;
    Ok((p - p1).dot(&n))
}

fn plane_normal(
    p1: &Vector3<f64>,
    p2: &Vector3<f64>,
    p3: &Vector3<f64>,
) -> Result<Vector3<f64>, MatchError> {
    let c = (p2 - p1).cross(&(p3 - p1));
    if c.norm() < 1e-9 {
        return Err(MatchError::DegeneratePlane);
    }
    Ok(c.normalize())
}

/// `η − M(p)`, or `None` where the map cannot be interpolated.
pub fn intensity_residual(p: &Vector3<f64>, eta: f64, map: &VoxelIntensityMap) -> Option<f64> {
    map.trilinear_query(p).map(|m| eta - m)
}

/// Constant-velocity prediction: replays the motion from `T_{k-2}` to `T_{k-1}`.
pub fn predict_initial(prev: &Pose, prev2: &Pose) -> Pose {
    prev * &(prev2.inverse() * *prev)
}

/// Correspondence model fixed for one linearization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ResidualModel {
    Edge { p1: Vector3<f64>, p2: Vector3<f64> },
    Plane { p1: Vector3<f64>, normal: Vector3<f64> },
    /// With a surface `(point, normal)`, the map is read at the projection of
    /// the point onto that plane.
    Intensity {
        eta: f64,
        surface: Option<(Vector3<f64>, Vector3<f64>)>,
    },
}

#[derive(Debug, Clone, Copy)]
struct Correspondence {
    local: Vector3<f64>,
    model: ResidualModel,
}

/// Value and gradient with respect to the world-frame point.
fn model_residual(
    model: &ResidualModel,
    world: &Vector3<f64>,
    map: &VoxelIntensityMap,
    support: Option<f64>,
) -> Option<(f64, Vector3<f64>)> {
    match model {
        ResidualModel::Edge { p1, p2 } => {
            let u = (p2 - p1).normalize();
            let d = world - p1;
            let v = d - u * d.dot(&u);
            let r = v.norm();
            let g = if r > 1e-15 { v / r } else { Vector3::zeros() };
            Some((r, g))
        }
        ResidualModel::Plane { p1, normal } => Some(((world - p1).dot(normal), *normal)),
        ResidualModel::Intensity { eta, surface } => {
            let q = match surface {
                Some((p1, n)) => world - n * (world - p1).dot(n),
                None => *world,
            };
            let (m, grad) = match support {
                None => (map.trilinear_query(&q)?, trilinear_gradient(map, &q)?),
                Some(s) => map.interpolate_observed(&q, s)?,
            };
            let grad = match surface {
                Some((_, n)) => grad - n * n.dot(&grad),
                None => grad,
            };
            Some((eta - m, -grad))
        }
    }
}

/// Residual term of a sensor-frame point against a fixed model at `pose`,
/// with unit edge weight.
pub fn model_term(
    model: &ResidualModel,
    local: &Vector3<f64>,
    pose: &Pose,
    map: &VoxelIntensityMap,
    settings: &SolverSettings,
) -> Option<ResidualTerm> {
    let c = Correspondence {
        local: *local,
        model: *model,
    };
    term_for(&c, pose, map, settings, None)
}

fn trilinear_gradient(map: &VoxelIntensityMap, world: &Vector3<f64>) -> Option<Vector3<f64>> {
    // with all corners present the renormalized form coincides with the strict one
    map.interpolate_observed(world, 1.0 - 1e-12).map(|(_, g)| g)
}

fn term_for(
    c: &Correspondence,
    pose: &Pose,
    map: &VoxelIntensityMap,
    settings: &SolverSettings,
    plane_sigma: Option<f64>,
) -> Option<ResidualTerm> {
    let rotated = pose.rotation * c.local;
    let world = rotated + pose.translation;
    let (value, grad) = model_residual(&c.model, &world, map, settings.intensity_support)?;
    let rot = rotated.cross(&grad);
    let jacobian = RowVector6::new(rot.x, rot.y, rot.z, grad.x, grad.y, grad.z);
    let (kind, weight) = match c.model {
        ResidualModel::Edge { .. } => {
            let weight = match plane_sigma {
                Some(sigma) if settings.edge_azimuth_step > 0.0 => {
                    let q = c.local.norm() * settings.edge_azimuth_step;
                    let var = sigma * sigma;
                    var / (var + q * q / 12.0)
                }
                _ => 1.0,
            };
            (TermKind::Edge, weight)
        }
        ResidualModel::Plane { .. } => (TermKind::Plane, 1.0),
        ResidualModel::Intensity { .. } => (TermKind::Intensity, settings.intensity_weight),
    };
    Some(ResidualTerm {
        kind,
        value,
        jacobian,
        weight,
    })
}

/// Centroid and principal direction of a neighbourhood, if it is elongated
/// enough to be a line.
fn fit_line(points: &[Vector3<f64>], ratio: f64) -> Option<(Vector3<f64>, Vector3<f64>)> {
    let n = points.len() as f64;
    let mean = points.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    let (values, vectors) = sorted_eigen(&(cov / n));
    if values[2] <= 0.0 || values[2] < ratio * values[1].max(0.0) {
        return None;
    }
    Some((mean, vectors.column(2).into_owned()))
}

fn associate_edge(
    world: &Vector3<f64>,
    map: &MapState,
    settings: &SolverSettings,
) -> Option<ResidualModel> {
    let nn = map.features.knn_edges(world, 5).ok()?;
    // the line runs through the nearest point along the neighbourhood's principal axis
    let (_, dir) = fit_line(&nn, settings.edge_linearity_ratio)?;
    let (p1, p2) = (nn[0], nn[0] + dir * 0.1);
    let r = edge_residual(world, &p1, &p2).ok()?;
    (r <= settings.correspondence_gate).then_some(ResidualModel::Edge { p1, p2 })
}

fn associate_plane(
    world: &Vector3<f64>,
    map: &MapState,
    settings: &SolverSettings,
) -> Option<ResidualModel> {
    let more = match map.features.knn_planars(world, 5) {
        Ok(v) => v,
        Err(_) => map.features.knn_planars(world, 3).ok()?,
    };
    let (p1, p2) = (more[0], more[1]);
    let well_shaped = |p3: &Vector3<f64>| {
        let a = p2 - p1;
        let b = p3 - p1;
        let s = a.cross(&b).norm() / (a.norm() * b.norm());
        s >= settings.plane_min_sine
    };
    // the three nearest often lie on one scan line
    let p3 = *more[2..].iter().find(|p| well_shaped(p))?;
    let normal = plane_normal(&p1, &p2, &p3).ok()?;
    // every neighbour must lie on the plane, else it straddles two surfaces
    if more.iter().any(|q| (q - p1).dot(&normal).abs() > settings.plane_max_deviation) {
        return None;
    }
    let r = (world - p1).dot(&normal);
    (r.abs() <= settings.correspondence_gate).then_some(ResidualModel::Plane { p1, normal })
}

fn associate(
    features: &FeatureSet,
    pose: &Pose,
    map: &MapState,
    settings: &SolverSettings,
) -> Result<Vec<Correspondence>, MatchError> {
    let n_edges = features.edges.len();
    let n = features.len();
    let geometric: Vec<Option<Correspondence>> = par_map_range(n, |i| {
        let local = if i < n_edges {
            features.edges[i].position
        } else {
            features.planars[i - n_edges].position
        };
        let world = pose.apply(&local);
        let model = if i < n_edges {
            associate_edge(&world, map, settings)
        } else {
            associate_plane(&world, map, settings)
        }?;
        Some(Correspondence { local, model })
    });
    let mut out: Vec<Correspondence> = geometric.iter().flatten().copied().collect();
    if out.len() < settings.min_geometry_terms {
        return Err(MatchError::InsufficientCorrespondences {
            found: out.len(),
            needed: settings.min_geometry_terms,
        });
    }
    if settings.intensity_weight > 0.0 {
        let points: Vec<_> = features.all_points().collect();
        let intensity: Vec<Option<Correspondence>> = par_map_range(points.len(), |i| {
            let p = points[i];
            let world = pose.apply(&p.position);
            let surface = if settings.intensity_on_surface {
                // planar features already carry their plane from the geometric pass
                let plane = if i < n_edges {
                    associate_plane(&world, map, settings)
                } else {
                    geometric[i].map(|c| c.model)
                };
                match plane? {
                    ResidualModel::Plane { p1, normal } => Some((p1, normal)),
                    _ => None,
                }
            } else {
                None
            };
            let model = ResidualModel::Intensity {
                eta: p.calibrated_intensity,
                surface,
            };
            let (r, _) = model_residual(&model, &world, &map.intensity, settings.intensity_support)?;
            (r.abs() <= settings.intensity_gate).then_some(Correspondence {
                local: p.position,
                model,
            })
        });
        out.extend(intensity.into_iter().flatten());
    }
    Ok(out)
}

fn linearize(
    corr: &[Correspondence],
    pose: &Pose,
    map: &MapState,
    settings: &SolverSettings,
    plane_sigma: Option<f64>,
) -> Vec<ResidualTerm> {
    par_map_range(corr.len(), |i| {
        term_for(&corr[i], pose, &map.intensity, settings, plane_sigma)
    })
    .into_iter()
    .flatten()
    .collect()
}

/// Associates every feature with the map at `pose` and linearizes the
/// resulting residuals.
pub fn build_residuals(
    features: &FeatureSet,
    pose: &Pose,
    map: &MapState,
    settings: &SolverSettings,
) -> Result<Vec<ResidualTerm>, MatchError> {
    let corr = associate(features, pose, map, settings)?;
    Ok(linearize(&corr, pose, map, settings, None))
}

/// Huber cost `ρ(r)` and IRLS weight `ρ'(r)/r`.
pub fn huber(r: f64, delta: f64) -> (f64, f64) {
    let a = r.abs();
    if a <= delta {
        (0.5 * r * r, 1.0)
    } else {
        (delta * (a - 0.5 * delta), delta / a)
    }
}

pub fn robust_cost(terms: &[ResidualTerm], delta: f64) -> f64 {
    terms
        .iter()
        .map(|t| t.weight * huber(t.value, delta).0)
        .sum()
}

/// Huber thresholds for geometric and intensity terms.
#[derive(Debug, Clone, Copy)]
struct Kernel {
    geometry: f64,
    intensity: f64,
    /// Robust standard deviation of the plane residuals.
    plane_sigma: Option<f64>,
    /// Multiplies intensity weights so both classes are compared in units of
    /// their own residual spread: `(σ_plane / σ_intensity)²`.
    intensity_balance: f64,
}

impl Kernel {
    fn fixed(delta: f64) -> Self {
        Self {
            geometry: delta,
            intensity: delta,
            plane_sigma: None,
            intensity_balance: 1.0,
        }
    }

    fn adapted(terms: &[ResidualTerm], delta: f64) -> Self {
        let sigma = |kind: TermKind| {
            let mut r: Vec<f64> = terms
                .iter()
                .filter(|t| t.kind == kind)
                .map(|t| t.value.abs())
                .collect();
            if r.is_empty() {
                return None;
            }
            let mid = r.len() / 2;
            Some(1.4826 * *r.select_nth_unstable_by(mid, f64::total_cmp).1)
        };
        let threshold = |s: f64| (1.345 * s).clamp(1e-6, delta);
        let plane_sigma = sigma(TermKind::Plane);
        // planes are the most numerous and least biased geometric terms
        let geometry = plane_sigma
            .or_else(|| sigma(TermKind::Edge))
            .map_or(delta, threshold);
        let intensity_sigma = sigma(TermKind::Intensity);
        let intensity_balance = match (plane_sigma, intensity_sigma) {
            // never amplified: with near-exact intensities a tiny bias would outweigh geometry
            (Some(g), Some(i)) => (g.max(1e-9) / i.max(1e-9)).powi(2).min(1.0),
            _ => 1.0,
        };
        Self {
            geometry,
            intensity: intensity_sigma.map_or(delta, threshold),
            plane_sigma: plane_sigma.map(|s| s.max(1e-9)),
            intensity_balance,
        }
    }

    fn delta(&self, t: &ResidualTerm) -> f64 {
        match t.kind {
            TermKind::Intensity => self.intensity,
            _ => self.geometry,
        }
    }

    fn weight(&self, t: &ResidualTerm) -> f64 {
        match t.kind {
            TermKind::Intensity => t.weight * self.intensity_balance,
            _ => t.weight,
        }
    }

    fn cost(&self, terms: &[ResidualTerm]) -> f64 {
        terms
            .iter()
            .map(|t| self.weight(t) * huber(t.value, self.delta(t)).0)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub pose: Pose,
    pub final_cost: f64,
    pub iterations: usize,
    /// Number of geometric terms at the last linearization.
    pub geometry_terms: usize,
    /// Number of increment directions that were not observable at the last
    /// accepted step.
    pub degenerate_directions: usize,
    /// Robust cost before and after each accepted step, both at that step's
    /// linearization.
    pub step_costs: Vec<(f64, f64)>,
}

/// Damped, observability-projected step: solves `(H + μI) δ = −b` on the
/// eigenvectors of `H` whose eigenvalues clear the threshold.
fn damped_step(h: &Matrix6<f64>, b: &Vector6<f64>, mu: f64, threshold: f64) -> (Vector6<f64>, usize) {
    let eig = SymmetricEigen::new(*h);
    let max = eig.eigenvalues.max().max(0.0);
    let mut step = Vector6::zeros();
    let mut skipped = 0;
    for i in 0..6 {
        let e = eig.eigenvalues[i];
        if e <= threshold * max || e <= 0.0 {
            skipped += 1;
            continue;
        }
        let v = eig.eigenvectors.column(i);
        step -= v * (v.dot(b) / (e + mu));
    }
    (step, skipped)
}

/// Estimates the scan pose by minimizing the robust residual sum starting from
/// `initial`. Correspondences are re-associated every iteration.
pub fn solve_pose(
    features: &FeatureSet,
    initial: &Pose,
    map: &MapState,
    settings: &SolverSettings,
) -> Result<SolveResult, MatchError> {
    let delta = settings.robust_kernel_delta;
    let mut pose = *initial;
    let mut lambda = settings.initial_damping;
    let mut final_cost = f64::INFINITY;
    let mut geometry_terms = 0;
    let mut degenerate_directions = 0;
    let mut iterations = 0;
    let mut step_costs = Vec::new();

    while iterations < settings.max_iterations {
        iterations += 1;
        let corr = associate(features, &pose, map, settings)?;
        let mut terms = linearize(&corr, &pose, map, settings, None);
        geometry_terms = terms
            .iter()
            .filter(|t| t.kind != TermKind::Intensity)
            .count();
        let kernel = if settings.adaptive_kernel {
            Kernel::adapted(&terms, delta)
        } else {
            Kernel::fixed(delta)
        };
        if kernel.plane_sigma.is_some() && settings.edge_azimuth_step > 0.0 {
            terms = linearize(&corr, &pose, map, settings, kernel.plane_sigma);
        }
        let cost = kernel.cost(&terms);
        if !cost.is_finite() {
            return Err(MatchError::SolverDiverged);
        }
        final_cost = robust_cost(&terms, delta);

        let mut h = Matrix6::zeros();
        let mut b = Vector6::zeros();
        for t in &terms {
            let w = kernel.weight(t) * huber(t.value, kernel.delta(t)).1;
            let j = t.jacobian.transpose();
            h += w * j * t.jacobian;
            b += w * t.value * j;
        }
        let scale = h.diagonal().max().max(1e-12);

        let mut rejected = 0;
        let mut converged = false;
        loop {
            let (step, skipped) =
                damped_step(&h, &b, lambda * scale, settings.observability_threshold);
            degenerate_directions = skipped;
            if step.norm() < settings.parameter_tolerance {
                converged = true;
                break;
            }
            let candidate = pose.retract(&step);
            let trial = linearize(&corr, &candidate, map, settings, kernel.plane_sigma);
            let trial_cost = kernel.cost(&trial);
            if !trial_cost.is_finite() {
                return Err(MatchError::SolverDiverged);
            }
            if trial_cost <= cost {
                step_costs.push((cost, trial_cost));
                pose = candidate;
                final_cost = robust_cost(&trial, delta);
                lambda = (lambda * 0.3).max(1e-12);
                break;
            }
            rejected += 1;
            lambda *= 10.0;
            // no descent direction left at this linearization
            if rejected >= 5 {
                converged = true;
                break;
            }
        }
        if converged {
            break;
        }
    }

    Ok(SolveResult {
        pose,
        final_cost,
        iterations,
        geometry_terms,
        degenerate_directions,
        step_costs,
    })
}
