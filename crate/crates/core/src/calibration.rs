//! Incidence-angle intensity calibration.
//!
//! Raw returns follow `I ∝ ρ cos α / R²`. Sensors of the kind targeted here
//! already compensate range, so by default only the `cos α` factor is divided
//! out; the `R²` factor is available behind `use_range_correction`. The global
//! constant of the return-power model is left out, so calibrated intensities
//! are relative reflectivities.

use std::collections::HashMap;
use std::sync::OnceLock;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::{Point, Scan};
use crate::par::par_map_range;
use crate::spatial::KdTree;

#[derive(Debug, Error, PartialEq)]
pub enum CalibrationError {
    #[error("degenerate neighborhood: points are collinear or coincident")]
    DegenerateNeighborhood,
    #[error("no point survived calibration filtering")]
    EmptyAfterFilter,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationParams {
    /// Raw intensity below which a return is considered too noisy to use.
    pub min_intensity: f64,
    /// Neighbours used for the surface normal. 2 uses the cross product of the
    /// two nearest points; more fits the smallest covariance eigenvector.
    pub normal_neighbors: usize,
    /// Lower clamp on `cos α` so grazing returns stay bounded.
    pub min_cos_incidence: f64,
    /// Also multiply by `R²` for sensors without internal range compensation.
    pub use_range_correction: bool,
}

impl Default for CalibrationParams {
    fn default() -> Self {
        Self {
            // 2% of a [0, 1] full scale
            min_intensity: 0.02,
            normal_neighbors: 2,
            min_cos_incidence: 0.1,
            use_range_correction: false,
        }
    }
}

/// Unit normal of the surface through `p`, `p1`, `p2`, oriented towards the
/// sensor origin (`n · p ≤ 0`).
pub fn estimate_normal(
    p: &Vector3<f64>,
    p1: &Vector3<f64>,
    p2: &Vector3<f64>,
) -> Result<Vector3<f64>, CalibrationError> {
    let a = p - p1;
    let b = p - p2;
    let scale = a.norm() * b.norm();
    if scale == 0.0 {
        return Err(CalibrationError::DegenerateNeighborhood);
    }
    let n = a.cross(&b) / scale;
    if n.norm() < 1e-9 {
        return Err(CalibrationError::DegenerateNeighborhood);
    }
    Ok(orient_towards_origin(n.normalize(), p))
}

/// Least-squares plane normal of `p` and its neighbours, oriented towards the
/// sensor origin.
pub fn estimate_normal_pca(
    p: &Vector3<f64>,
    neighbors: &[Vector3<f64>],
) -> Result<Vector3<f64>, CalibrationError> {
    if neighbors.len() < 2 {
        return Err(CalibrationError::DegenerateNeighborhood);
    }
    let count = (neighbors.len() + 1) as f64;
    let mean = (neighbors.iter().sum::<Vector3<f64>>() + p) / count;
    let mut cov = (p - mean) * (p - mean).transpose();
    for q in neighbors {
        let d = q - mean;
        cov += d * d.transpose();
    }
    cov /= count;
    let (values, vectors) = sorted_eigen(&cov);
    // a line-like neighbourhood leaves the normal undetermined
    if values[1] <= 1e-12 * values[2].max(1e-300) || values[2] == 0.0 {
        return Err(CalibrationError::DegenerateNeighborhood);
    }
    let n: Vector3<f64> = vectors.column(0).into();
    Ok(orient_towards_origin(n.normalize(), p))
}

/// Eigen-decomposition of a symmetric 3x3 matrix, eigenvalues ascending.
pub(crate) fn sorted_eigen(m: &Matrix3<f64>) -> ([f64; 3], Matrix3<f64>) {
    let eig = m.symmetric_eigen();
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = [
        eig.eigenvalues[idx[0]],
        eig.eigenvalues[idx[1]],
        eig.eigenvalues[idx[2]],
    ];
    let vectors = Matrix3::from_columns(&[
        eig.eigenvectors.column(idx[0]).into_owned(),
        eig.eigenvectors.column(idx[1]).into_owned(),
        eig.eigenvectors.column(idx[2]).into_owned(),
    ]);
    (values, vectors)
}

fn orient_towards_origin(n: Vector3<f64>, p: &Vector3<f64>) -> Vector3<f64> {
    if n.dot(p) > 0.0 {
        -n
    } else {
        n
    }
}

/// `|p · n| / |p|`, clamped to `[min_cos, 1]`.
pub fn cos_incidence(p: &Vector3<f64>, n: &Vector3<f64>, min_cos: f64) -> f64 {
    let range = p.norm();
    if range == 0.0 {
        return min_cos;
    }
    (p.dot(n).abs() / range).clamp(min_cos, 1.0)
}

/// Replaces each point's `calibrated_intensity` with its incidence-corrected
/// value. Normals come from the nearest neighbours, or for scans with ring
/// indices from the own and adjacent rings. Low-intensity points and points without a usable normal are
/// dropped; the surviving points keep their order.
pub fn calibrate_scan(scan: &Scan, params: &CalibrationParams) -> Result<Scan, CalibrationError> {
    if scan.is_empty() {
        return Err(CalibrationError::EmptyAfterFilter);
    }
    let positions: Vec<Vector3<f64>> = scan.points.iter().map(|p| p.position).collect();
    let rings = RingIndex::build(scan);
    // only needed for unringed scans or ring lookups that come up short
    let tree = OnceLock::new();
    let k = params.normal_neighbors.max(2);

    let calibrated: Vec<Option<Point>> = par_map_range(scan.len(), |i| {
        let point = &scan.points[i];
        if point.intensity < params.min_intensity || point.range() == 0.0 {
            return None;
        }
        let p = point.position;
        let neighbors = rings
            .as_ref()
            .and_then(|r| r.neighbors(i, &p, k))
            .unwrap_or_else(|| {
                let tree = tree.get_or_init(|| KdTree::build(positions.clone()));
                tree.knn_filtered(&p, k, |j| j != i)
                    .iter()
                    .map(|n| *tree.point(n.index))
                    .collect()
            });
        if neighbors.len() < 2 {
            return None;
        }
        let normal = if k == 2 {
            estimate_normal(&p, &neighbors[0], &neighbors[1])
        } else {
            estimate_normal_pca(&p, &neighbors)
        }
        .ok()?;
        let cos = cos_incidence(&p, &normal, params.min_cos_incidence);
        let mut value = point.intensity / cos;
        if params.use_range_correction {
            value *= p.norm_squared();
        }
        Some(Point {
            calibrated_intensity: value,
            ..*point
        })
    });

    let points: Vec<Point> = calibrated.into_iter().flatten().collect();
    if points.is_empty() {
        return Err(CalibrationError::EmptyAfterFilter);
    }
    Ok(Scan {
        points,
        timestamp: scan.timestamp,
        frame_index: scan.frame_index,
    })
}

/// Per-ring k-d trees. Within a ring the nearest points are nearly collinear,
/// so normals draw neighbours from the point's own ring and the adjacent ones.
struct RingIndex {
    ring_of: Vec<u16>,
    trees: HashMap<u16, (KdTree, Vec<usize>)>,
}

impl RingIndex {
    fn build(scan: &Scan) -> Option<Self> {
        if !scan.has_rings() {
            return None;
        }
        let mut members: HashMap<u16, Vec<usize>> = HashMap::new();
        let ring_of: Vec<u16> = scan.points.iter().map(|p| p.ring.unwrap_or(0)).collect();
        for (i, r) in ring_of.iter().enumerate() {
            members.entry(*r).or_default().push(i);
        }
        let trees = members
            .into_iter()
            .map(|(r, idx)| {
                let pts = idx.iter().map(|&i| scan.points[i].position).collect();
                (r, (KdTree::build(pts), idx))
            })
            .collect();
        Some(Self { ring_of, trees })
    }

    fn nearest_in(&self, ring: u16, p: &Vector3<f64>, k: usize, skip: usize) -> Vec<(f64, Vector3<f64>)> {
        let Some((tree, idx)) = self.trees.get(&ring) else {
            return Vec::new();
        };
        tree.knn_filtered(p, k, |j| idx[j] != skip)
            .iter()
            .map(|n| (n.dist2, *tree.point(n.index)))
            .collect()
    }

    /// For `k = 2`: the nearest point of the own ring and the nearest point of
    /// an adjacent ring. Otherwise about half from the own ring and the rest
    /// split over both adjacent rings.
    fn neighbors(&self, i: usize, p: &Vector3<f64>, k: usize) -> Option<Vec<Vector3<f64>>> {
        let r = self.ring_of[i];
        let adjacent: Vec<u16> = [r.checked_sub(1), r.checked_add(1)].into_iter().flatten().collect();
        let own_k = if k == 2 { 1 } else { k.div_ceil(2) };
        let adj_k = if k == 2 { 1 } else { (k - own_k).div_ceil(2) };
        let own = self.nearest_in(r, p, own_k, i);
        let mut adj: Vec<(f64, Vector3<f64>)> = adjacent
            .iter()
            .flat_map(|&a| self.nearest_in(a, p, adj_k, i))
            .collect();
        if own.is_empty() || adj.is_empty() {
            return None;
        }
        if k == 2 {
            adj.sort_by(|a, b| a.0.total_cmp(&b.0));
            adj.truncate(1);
        }
        Some(own.into_iter().chain(adj).map(|(_, q)| q).collect())
    }
}
