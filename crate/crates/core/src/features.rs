//! Edge / planar feature selection from combined geometric and intensity
//! variation.
//!
//! Each point gets `σ = w_G·σ_G/|p| + w_I·σ_I/η̄`, where `σ_G` and `σ_I` are
//! the mean absolute position and intensity differences to its neighbourhood
//! and `η̄` is the scan's mean calibrated intensity. Within each sector the
//! highest-σ points become edges and the lowest-σ points planars.

use std::f64::consts::PI;

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::{Point, Scan};
use crate::spatial::KdTree;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("need {needed} neighbours but the scan/ring only has {available}")]
    InsufficientNeighbors { needed: usize, available: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureWeights {
    pub w_geometry: f64,
    pub w_intensity: f64,
    /// Total neighbourhood size |N_i| (half on each side along a ring).
    pub neighborhood_size: usize,
    pub edge_count_per_sector: usize,
    pub planar_count_per_sector: usize,
    /// Azimuthal sectors per ring (per scan when rings are unknown).
    pub sector_count: usize,
    /// Minimum normalized σ for a point to become an edge.
    pub edge_floor: f64,
    /// Ring-index radius of non-maximum suppression around a selected point.
    pub suppression_radius: usize,
    /// Points whose spacing to both ring neighbours exceeds this multiple of
    /// `range · Δazimuth` lie on surfaces nearly parallel to the beam and are
    /// never selected.
    pub grazing_ratio: f64,
    /// Relative range jump between ring neighbours treated as an occlusion.
    pub occlusion_ratio: f64,
    /// Selection scores use `max(0, σ_I − ν_i)` in place of `σ_I`, with `ν_i`
    /// the point's expected σ_I from intensity noise alone, so noise on
    /// uniform surfaces does not produce edges.
    pub intensity_noise_offset: bool,
}

impl Default for FeatureWeights {
    fn default() -> Self {
        Self {
            w_geometry: 1.0,
            w_intensity: 1.0,
            neighborhood_size: 10,
            edge_count_per_sector: 2,
            planar_count_per_sector: 4,
            sector_count: 6,
            edge_floor: 0.02,
            suppression_radius: 5,
            grazing_ratio: 2.0,
            occlusion_ratio: 0.1,
            intensity_noise_offset: true,
        }
    }
}

impl FeatureWeights {
    /// Same weights with the intensity term switched off.
    pub fn geometry_only(mut self) -> Self {
        self.w_intensity = 0.0;
        self
    }
}

/// Selected features of one scan. `scores` is indexed like the input scan.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureSet {
    pub edges: Vec<Point>,
    pub planars: Vec<Point>,
    pub edge_indices: Vec<usize>,
    pub planar_indices: Vec<usize>,
    pub scores: Vec<f64>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.edges.len() + self.planars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty() && self.planars.is_empty()
    }

    /// Edges followed by planars.
    pub fn all_points(&self) -> impl Iterator<Item = &Point> {
        self.edges.iter().chain(self.planars.iter())
    }
}

/// Mean absolute position and intensity difference between a point and a
/// neighbourhood: `(σ_G, σ_I)`.
pub fn distributions(
    position: &Vector3<f64>,
    intensity: f64,
    neighbors: &[(Vector3<f64>, f64)],
) -> (f64, f64) {
    if neighbors.is_empty() {
        return (0.0, 0.0);
    }
    let n = neighbors.len() as f64;
    let (sg, si) = neighbors.iter().fold((0.0, 0.0), |(sg, si), (p, eta)| {
        (sg + (position - p).norm(), si + (intensity - eta).abs())
    });
    (sg / n, si / n)
}

/// Per-point neighbourhoods: ring-ordered windows when every point has a
/// ring index, otherwise the Euclidean nearest neighbours.
struct Neighborhoods {
    /// Indices of each ring in scan order; a single pseudo-ring when unringed.
    rings: Vec<Vec<usize>>,
    /// For each point: (ring id, position within ring).
    slot: Vec<(usize, usize)>,
    knn: Option<Vec<Vec<usize>>>,
}

impl Neighborhoods {
    fn build(scan: &Scan, size: usize) -> Self {
        if scan.has_rings() {
            let max_ring = scan
                .points
                .iter()
                .map(|p| p.ring.unwrap_or(0) as usize)
                .max()
                .unwrap_or(0);
            let mut rings = vec![Vec::new(); max_ring + 1];
            let mut slot = vec![(0, 0); scan.len()];
            for (i, p) in scan.points.iter().enumerate() {
                let r = p.ring.unwrap_or(0) as usize;
                slot[i] = (r, rings[r].len());
                rings[r].push(i);
            }
            Self {
                rings,
                slot,
                knn: None,
            }
        } else {
            let tree = KdTree::build(scan.points.iter().map(|p| p.position).collect());
            let knn = (0..scan.len())
                .map(|i| {
                    tree.knn_filtered(&scan.points[i].position, size, |j| j != i)
                        .into_iter()
                        .map(|n| n.index)
                        .collect()
                })
                .collect();
            Self {
                rings: vec![(0..scan.len()).collect()],
                slot: (0..scan.len()).map(|i| (0, i)).collect(),
                knn: Some(knn),
            }
        }
    }

    fn neighbors(&self, i: usize, size: usize) -> Result<Vec<usize>, FeatureError> {
        if let Some(knn) = &self.knn {
            let n = &knn[i];
            if n.len() < size {
                return Err(FeatureError::InsufficientNeighbors {
                    needed: size,
                    available: n.len(),
                });
            }
            return Ok(n.clone());
        }
        let (r, pos) = self.slot[i];
        let ring = &self.rings[r];
        if ring.len() < size + 1 {
            return Err(FeatureError::InsufficientNeighbors {
                needed: size,
                available: ring.len().saturating_sub(1),
            });
        }
        let half = size / 2;
        // shift the window inward at ring ends so |N_i| stays constant
        let start = pos.saturating_sub(half).min(ring.len() - size - 1);
        Ok((start..=start + size)
            .filter(|&k| k != pos)
            .map(|k| ring[k])
            .take(size)
            .collect())
    }
}

/// `(σ_G, σ_I)` of point `point_index` over its neighbourhood of
/// `neighborhood_size` points, using calibrated intensities.
pub fn local_distributions(
    point_index: usize,
    scan: &Scan,
    neighborhood_size: usize,
) -> Result<(f64, f64), FeatureError> {
    if scan.len() < neighborhood_size + 1 {
        return Err(FeatureError::InsufficientNeighbors {
            needed: neighborhood_size,
            available: scan.len().saturating_sub(1),
        });
    }
    let hoods = Neighborhoods::build(scan, neighborhood_size);
    local_distributions_with(&hoods, point_index, scan, neighborhood_size)
}

fn local_distributions_with(
    hoods: &Neighborhoods,
    i: usize,
    scan: &Scan,
    size: usize,
) -> Result<(f64, f64), FeatureError> {
    let idx = hoods.neighbors(i, size)?;
    let neigh: Vec<_> = idx
        .iter()
        .map(|&j| {
            (
                scan.points[j].position,
                scan.points[j].calibrated_intensity,
            )
        })
        .collect();
    let p = &scan.points[i];
    Ok(distributions(&p.position, p.calibrated_intensity, &neigh))
}

/// `w_G·σ_G + w_I·σ_I`.
pub fn combined_score(sigma_g: f64, sigma_i: f64, weights: &FeatureWeights) -> f64 {
    weights.w_geometry * sigma_g + weights.w_intensity * sigma_i
}

fn azimuth(p: &Vector3<f64>) -> f64 {
    p.y.atan2(p.x)
}

fn azimuth_gap(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let mut d = (azimuth(a) - azimuth(b)).abs();
    if d > PI {
        d = 2.0 * PI - d;
    }
    d
}

/// Marks points that must not be selected: the far side of occlusion
/// boundaries and returns from surfaces nearly parallel to the beam.
fn unreliable_points(scan: &Scan, hoods: &Neighborhoods, weights: &FeatureWeights) -> Vec<bool> {
    let mut bad = vec![false; scan.len()];
    if hoods.knn.is_some() {
        return bad;
    }
    let span = weights.neighborhood_size / 2;
    for ring in &hoods.rings {
        for w in 0..ring.len().saturating_sub(1) {
            let (a, b) = (&scan.points[ring[w]], &scan.points[ring[w + 1]]);
            let (ra, rb) = (a.range(), b.range());
            if (ra - rb).abs() > weights.occlusion_ratio * ra.min(rb) {
                if ra > rb {
                    for k in w.saturating_sub(span.saturating_sub(1))..=w {
                        bad[ring[k]] = true;
                    }
                } else {
                    for k in (w + 1)..(w + 1 + span).min(ring.len()) {
                        bad[ring[k]] = true;
                    }
                }
            }
        }
        for w in 1..ring.len().saturating_sub(1) {
            let p = &scan.points[ring[w]];
            let range = p.range();
            let ratio = |q: &Point| {
                let gap = azimuth_gap(&p.position, &q.position).max(1e-12);
                (p.position - q.position).norm() / (range * gap)
            };
            let prev = ratio(&scan.points[ring[w - 1]]);
            let next = ratio(&scan.points[ring[w + 1]]);
            if prev > weights.grazing_ratio && next > weights.grazing_ratio {
                bad[ring[w]] = true;
            }
        }
    }
    bad
}

/// Scores every point and picks per-sector edge and planar features.
pub fn select_features(scan: &Scan, weights: &FeatureWeights) -> FeatureSet {
    let n = scan.len();
    if n < weights.neighborhood_size + 1 {
        return FeatureSet {
            scores: vec![0.0; n],
            ..Default::default()
        };
    }
    let hoods = Neighborhoods::build(scan, weights.neighborhood_size);
    let mean_eta = {
        let s: f64 = scan.points.iter().map(|p| p.calibrated_intensity).sum();
        let m = s / n as f64;
        if m > 0.0 {
            m
        } else {
            1.0
        }
    };
    let sigmas: Vec<Option<(f64, f64)>> = (0..n)
        .map(|i| {
            let (sg, si) =
                local_distributions_with(&hoods, i, scan, weights.neighborhood_size).ok()?;
            let range = scan.points[i].range().max(1e-6);
            Some((sg / range, si / mean_eta))
        })
        .collect();
    let noise = if weights.intensity_noise_offset {
        intensity_noise_levels(scan, &sigmas)
    } else {
        vec![0.0; n]
    };
    let raw: Vec<Option<f64>> = sigmas
        .iter()
        .map(|s| s.map(|(sg, si)| combined_score(sg, si, weights)))
        .collect();
    let scores: Vec<Option<f64>> = sigmas
        .iter()
        .zip(&noise)
        .map(|(s, nu)| s.map(|(sg, si)| combined_score(sg, (si - nu).max(0.0), weights)))
        .collect();
    let bad = unreliable_points(scan, &hoods, weights);

    let mut edge_taken = vec![false; n];
    let mut edge_blocked = vec![false; n];
    let mut planar_blocked = vec![false; n];
    let mut edge_indices = Vec::new();
    let mut planar_indices = Vec::new();
    let sectors = weights.sector_count.max(1);

    for ring in &hoods.rings {
        let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); sectors];
        for &i in ring {
            if scores[i].is_none() || bad[i] {
                continue;
            }
            let s = ((azimuth(&scan.points[i].position) + PI) / (2.0 * PI) * sectors as f64)
                as usize;
            buckets[s.min(sectors - 1)].push(i);
        }
        for bucket in &mut buckets {
            bucket.sort_by(|&a, &b| {
                scores[b]
                    .unwrap()
                    .total_cmp(&scores[a].unwrap())
                    .then(a.cmp(&b))
            });
            let mut picked = 0;
            for &i in bucket.iter() {
                if picked >= weights.edge_count_per_sector {
                    break;
                }
                if scores[i].unwrap() < weights.edge_floor {
                    break;
                }
                if edge_blocked[i] {
                    continue;
                }
                edge_taken[i] = true;
                edge_indices.push(i);
                picked += 1;
                suppress(&hoods, i, weights.suppression_radius, &mut edge_blocked);
            }
            let mut picked = 0;
            for &i in bucket.iter().rev() {
                if picked >= weights.planar_count_per_sector {
                    break;
                }
                if edge_taken[i] || planar_blocked[i] {
                    continue;
                }
                planar_indices.push(i);
                picked += 1;
                suppress(&hoods, i, weights.suppression_radius, &mut planar_blocked);
            }
        }
    }
    edge_indices.sort_unstable();
    planar_indices.sort_unstable();
    FeatureSet {
        edges: edge_indices.iter().map(|&i| scan.points[i]).collect(),
        planars: planar_indices.iter().map(|&i| scan.points[i]).collect(),
        edge_indices,
        planar_indices,
        scores: raw.into_iter().map(|s| s.unwrap_or(0.0)).collect(),
    }
}

/// Per-point σ_I expected from noise alone. Calibration scales a point's noise
/// by its gain `calibrated / raw`, so σ_I / gain is roughly identically
/// distributed over uniform surfaces; its `median + 3 · 1.4826 · MAD` times
/// the gain is the level.
fn intensity_noise_levels(scan: &Scan, sigmas: &[Option<(f64, f64)>]) -> Vec<f64> {
    let gains: Vec<Option<f64>> = scan
        .points
        .iter()
        .map(|p| (p.intensity > 1e-12).then(|| p.calibrated_intensity / p.intensity))
        .collect();
    let z: Vec<f64> = sigmas
        .iter()
        .zip(&gains)
        .filter_map(|(s, g)| Some(s.as_ref()?.1 / (*g)?))
        .collect();
    let med = median(z.clone());
    let mad = median(z.iter().map(|v| (v - med).abs()).collect());
    let level = med + 3.0 * 1.4826 * mad;
    let typical_gain = median(gains.iter().flatten().copied().collect());
    gains.iter().map(|g| g.unwrap_or(typical_gain) * level).collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mid = v.len() / 2;
    *v.select_nth_unstable_by(mid, f64::total_cmp).1
}

fn suppress(hoods: &Neighborhoods, i: usize, radius: usize, blocked: &mut [bool]) {
    blocked[i] = true;
    if let Some(knn) = &hoods.knn {
        for &j in knn[i].iter().take(radius) {
            blocked[j] = true;
        }
        return;
    }
    let (r, pos) = hoods.slot[i];
    let ring = &hoods.rings[r];
    let lo = pos.saturating_sub(radius);
    let hi = (pos + radius).min(ring.len() - 1);
    for &j in &ring[lo..=hi] {
        blocked[j] = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_distance_neighbourhood() {
        let neigh = vec![
            (Vector3::new(1.0, 0.0, 0.0), 0.0),
            (Vector3::new(-1.0, 0.0, 0.0), 0.0),
            (Vector3::new(0.0, 1.0, 0.0), 0.0),
            (Vector3::new(0.0, 0.0, -1.0), 0.0),
        ];
        let (sg, _) = distributions(&Vector3::zeros(), 0.0, &neigh);
        assert_abs_diff_eq!(sg, 1.0);
    }

    #[test]
    fn intensity_mean_absolute_difference() {
        let neigh = vec![(Vector3::zeros(), 3.0), (Vector3::zeros(), 7.0)];
        let (_, si) = distributions(&Vector3::zeros(), 5.0, &neigh);
        assert_abs_diff_eq!(si, 2.0);
    }

    fn ring_scan(n: usize, rng: &mut ChaCha8Rng) -> Scan {
        let pts = (0..n)
            .map(|k| {
                let az = -PI + 2.0 * PI * k as f64 / n as f64;
                let r = rng.random_range(4.0..6.0);
                let mut p = Point::new(r * az.cos(), r * az.sin(), 0.3, rng.random_range(0.1..0.9));
                p.ring = Some(0);
                p
            })
            .collect();
        Scan::new(pts, 0.0, 0)
    }

    #[test]
    fn matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scan = ring_scan(200, &mut rng);
        for &i in &[0usize, 1, 57, 120, 199] {
            let (sg, si) = local_distributions(i, &scan, 10).unwrap();
            // explicit window, shifted inward at the ends
            let start = i.saturating_sub(5).min(200 - 11);
            let idx: Vec<usize> = (start..=start + 10).filter(|&k| k != i).take(10).collect();
            let p = &scan.points[i];
            let mut eg = 0.0;
            let mut ei = 0.0;
            for &j in &idx {
                eg += (p.position - scan.points[j].position).norm();
                ei += (p.calibrated_intensity - scan.points[j].calibrated_intensity).abs();
            }
            assert_abs_diff_eq!(sg, eg / 10.0, epsilon = 1e-12);
            assert_abs_diff_eq!(si, ei / 10.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn too_few_points_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scan = ring_scan(8, &mut rng);
        assert!(matches!(
            local_distributions(0, &scan, 10),
            Err(FeatureError::InsufficientNeighbors { .. })
        ));
    }

    #[test]
    fn combined_score_arithmetic() {
        let w = FeatureWeights {
            w_geometry: 0.5,
            w_intensity: 0.5,
            ..Default::default()
        };
        assert_abs_diff_eq!(combined_score(1.0, 2.0, &w), 1.5);
        let geo = FeatureWeights {
            w_intensity: 0.0,
            ..w
        };
        assert_abs_diff_eq!(combined_score(1.0, 2.0, &geo), 0.5);
        assert!(combined_score(1.0, 2.1, &w) > combined_score(1.0, 2.0, &w));
    }

    #[test]
    fn selection_is_deterministic_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scan = ring_scan(600, &mut rng);
        let w = FeatureWeights::default();
        let a = select_features(&scan, &w);
        let b = select_features(&scan, &w);
        assert_eq!(a, b);
        assert!(a.edges.len() <= w.sector_count * w.edge_count_per_sector);
        assert!(a.planars.len() <= w.sector_count * w.planar_count_per_sector);
        assert!(a.edge_indices.iter().all(|i| !a.planar_indices.contains(i)));
        assert!(a.scores.iter().all(|s| s.is_finite() && *s >= 0.0));
    }

    #[test]
    fn unringed_scans_use_euclidean_neighbours() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut scan = ring_scan(300, &mut rng);
        for p in &mut scan.points {
            p.ring = None;
        }
        let f = select_features(&scan, &FeatureWeights::default());
        assert!(!f.planars.is_empty());
        assert_eq!(f.scores.len(), 300);
    }
}
