//! Global map state: a sparse voxel grid of running-mean reflectivity and
//! downsampled edge / planar feature clouds.

use std::collections::HashMap;

use nalgebra::Vector3;
use thiserror::Error;

use crate::features::FeatureSet;
use crate::geometry::{Pose, Scan};
use crate::spatial::VoxelHashIndex;

#[derive(Debug, Error, PartialEq)]
pub enum MapError {
    #[error("only {found} of the {wanted} requested neighbours are within range")]
    NotEnoughNeighbors { wanted: usize, found: usize },
}

pub type CellIndex = [i64; 3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityCell {
    pub mean: f64,
    pub count: u64,
}

/// Sparse voxel grid of mean calibrated intensity. Cells that were never
/// observed are absent.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelIntensityMap {
    cell_size: f64,
    cells: HashMap<CellIndex, IntensityCell>,
}

impl VoxelIntensityMap {
    pub fn new(cell_size: f64) -> Self {
        assert!(cell_size > 0.0, "cell size must be positive");
        Self {
            cell_size,
            cells: HashMap::new(),
        }
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cell_index(&self, p: &Vector3<f64>) -> CellIndex {
        [
            (p.x / self.cell_size).floor() as i64,
            (p.y / self.cell_size).floor() as i64,
            (p.z / self.cell_size).floor() as i64,
        ]
    }

    pub fn cell_center(&self, idx: &CellIndex) -> Vector3<f64> {
        Vector3::new(
            (idx[0] as f64 + 0.5) * self.cell_size,
            (idx[1] as f64 + 0.5) * self.cell_size,
            (idx[2] as f64 + 0.5) * self.cell_size,
        )
    }

    pub fn cell(&self, idx: &CellIndex) -> Option<&IntensityCell> {
        self.cells.get(idx)
    }

    /// Cells in ascending index order.
    pub fn sorted_cells(&self) -> Vec<(CellIndex, IntensityCell)> {
        let mut v: Vec<_> = self.cells.iter().map(|(k, c)| (*k, *c)).collect();
        v.sort_by_key(|(k, _)| *k);
        v
    }

    /// Running-mean update of the cell containing `position`.
    pub fn update_cell(&mut self, position: &Vector3<f64>, eta: f64) {
        let idx = self.cell_index(position);
        self.update_index(idx, eta);
    }

    pub fn update_index(&mut self, idx: CellIndex, eta: f64) {
        let cell = self.cells.entry(idx).or_insert(IntensityCell {
            mean: 0.0,
            count: 0,
        });
        cell.count += 1;
        cell.mean += (eta - cell.mean) / cell.count as f64;
    }

    /// Lower-corner cell index and fractional offsets of `p` inside the lattice
    /// of cell centres.
    fn lattice(&self, p: &Vector3<f64>) -> (CellIndex, Vector3<f64>) {
        let mut base = [0i64; 3];
        let mut frac = Vector3::zeros();
        for a in 0..3 {
            let s = p[a] / self.cell_size - 0.5;
            let f = s.floor();
            base[a] = f as i64;
            frac[a] = s - f;
        }
        (base, frac)
    }

    /// Standard trilinear interpolation between the 8 cell centres around
    /// `position`. `None` when any of them was never observed.
    pub fn trilinear_query(&self, position: &Vector3<f64>) -> Option<f64> {
        let (base, u) = self.lattice(position);
        let mut acc = 0.0;
        for corner in 0..8 {
            let (dx, dy, dz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
            let idx = [base[0] + dx, base[1] + dy, base[2] + dz];
            let m = self.cells.get(&idx)?.mean;
            let w = axis_weight(u.x, dx) * axis_weight(u.y, dy) * axis_weight(u.z, dz);
            acc += w * m;
        }
        Some(acc)
    }

    /// Trilinear interpolation restricted to observed corners, with weights
    /// renormalized over them, plus its spatial gradient.
    ///
    /// Equals [`Self::trilinear_query`] when all 8 corners are observed. Thin
    /// structures such as walls only ever populate one layer of cells, so
    /// requiring all corners would discard nearly every surface point. Returns
    /// `None` when the observed corners carry less than `min_support` of the
    /// total weight.
    pub fn interpolate_observed(
        &self,
        position: &Vector3<f64>,
        min_support: f64,
    ) -> Option<(f64, Vector3<f64>)> {
        let (base, u) = self.lattice(position);
        let mut wsum = 0.0;
        let mut vsum = 0.0;
        let mut dw = Vector3::zeros();
        let mut dv = Vector3::zeros();
        for corner in 0..8 {
            let d = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
            let idx = [base[0] + d[0], base[1] + d[1], base[2] + d[2]];
            let Some(cell) = self.cells.get(&idx) else {
                continue;
            };
            let wx = axis_weight(u.x, d[0]);
            let wy = axis_weight(u.y, d[1]);
            let wz = axis_weight(u.z, d[2]);
            let w = wx * wy * wz;
            let sign = |b: i64| if b == 1 { 1.0 } else { -1.0 };
            let grad = Vector3::new(sign(d[0]) * wy * wz, sign(d[1]) * wx * wz, sign(d[2]) * wx * wy)
                / self.cell_size;
            wsum += w;
            vsum += w * cell.mean;
            dw += grad;
            dv += grad * cell.mean;
        }
        if wsum < min_support || wsum <= 0.0 {
            return None;
        }
        let value = vsum / wsum;
        let gradient = (dv - dw * value) / wsum;
        Some((value, gradient))
    }
}

#[inline]
fn axis_weight(u: f64, upper: i64) -> f64 {
    if upper == 1 {
        u
    } else {
        1.0 - u
    }
}

/// One downsampled point cloud with one stored point per leaf.
#[derive(Debug, Clone)]
struct PointLayer {
    index: VoxelHashIndex,
    leaves: HashMap<CellIndex, usize>,
    stamps: Vec<u64>,
    alive: Vec<bool>,
}

impl PointLayer {
    fn new(bucket: f64) -> Self {
        Self {
            index: VoxelHashIndex::new(bucket),
            leaves: HashMap::new(),
            stamps: Vec::new(),
            alive: Vec::new(),
        }
    }

    fn insert(&mut self, leaf: CellIndex, p: Vector3<f64>, stamp: u64, max_age: Option<u64>) -> bool {
        if let Some(&old) = self.leaves.get(&leaf) {
            let stale = max_age.is_some_and(|age| stamp.saturating_sub(self.stamps[old]) > age);
            if !stale {
                return false;
            }
            self.alive[old] = false;
        }
        let idx = self.index.insert(p);
        self.stamps.push(stamp);
        self.alive.push(true);
        self.leaves.insert(leaf, idx);
        true
    }

    fn live_len(&self) -> usize {
        self.leaves.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureMapConfig {
    /// Side of the downsampling leaf.
    pub downsample_leaf: f64,
    /// k-NN only considers points within this distance of the query.
    pub search_radius: f64,
    /// Side of the cube around the current position whose points are used
    /// for matching.
    pub local_window: f64,
    /// Points inserted more than this many frames ago are ignored by queries
    /// and may be overwritten. `None` keeps everything.
    pub max_age_frames: Option<u64>,
}

impl Default for FeatureMapConfig {
    fn default() -> Self {
        Self {
            downsample_leaf: 0.2,
            search_radius: 2.0,
            local_window: 200.0,
            max_age_frames: None,
        }
    }
}

/// Which feature cloud a query goes to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Edge,
    Planar,
}

/// Downsampled global edge and planar clouds.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    config: FeatureMapConfig,
    edges: PointLayer,
    planars: PointLayer,
    frame: u64,
    center: Vector3<f64>,
}

impl FeatureMap {
    pub fn new(config: FeatureMapConfig) -> Self {
        let bucket = (2.5 * config.downsample_leaf).min(config.search_radius);
        Self {
            config,
            edges: PointLayer::new(bucket),
            planars: PointLayer::new(bucket),
            frame: 0,
            center: Vector3::zeros(),
        }
    }

    pub fn config(&self) -> &FeatureMapConfig {
        &self.config
    }

    fn layer(&self, kind: FeatureKind) -> &PointLayer {
        match kind {
            FeatureKind::Edge => &self.edges,
            FeatureKind::Planar => &self.planars,
        }
    }

    fn leaf(&self, p: &Vector3<f64>) -> CellIndex {
        let l = self.config.downsample_leaf;
        [
            (p.x / l).floor() as i64,
            (p.y / l).floor() as i64,
            (p.z / l).floor() as i64,
        ]
    }

    /// Frame stamp attached to subsequent insertions.
    pub fn set_frame(&mut self, frame: u64) {
        self.frame = frame;
    }

    /// Centre of the local matching window.
    pub fn set_center(&mut self, center: Vector3<f64>) {
        self.center = center;
    }

    /// Inserts a world-frame point; returns false if its leaf is occupied.
    pub fn insert(&mut self, kind: FeatureKind, p: Vector3<f64>) -> bool {
        let leaf = self.leaf(&p);
        let (frame, max_age) = (self.frame, self.config.max_age_frames);
        let layer = match kind {
            FeatureKind::Edge => &mut self.edges,
            FeatureKind::Planar => &mut self.planars,
        };
        layer.insert(leaf, p, frame, max_age)
    }

    pub fn len(&self, kind: FeatureKind) -> usize {
        self.layer(kind).live_len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.live_len() == 0 && self.planars.live_len() == 0
    }

    /// All live points of one cloud, in insertion order.
    pub fn points(&self, kind: FeatureKind) -> Vec<Vector3<f64>> {
        let layer = self.layer(kind);
        layer
            .index
            .points()
            .iter()
            .enumerate()
            .filter(|(i, _)| layer.alive[*i])
            .map(|(_, p)| *p)
            .collect()
    }

    /// The `k` nearest live points to `query`, distance-ascending, ties by
    /// insertion order.
    pub fn knn(
        &self,
        kind: FeatureKind,
        query: &Vector3<f64>,
        k: usize,
    ) -> Result<Vec<Vector3<f64>>, MapError> {
        let layer = self.layer(kind);
        let half = 0.5 * self.config.local_window;
        let frame = self.frame;
        let max_age = self.config.max_age_frames;
        let points = layer.index.points();
        let found = layer.index.knn_within(query, k, self.config.search_radius, |i| {
            layer.alive[i]
                && max_age.is_none_or(|age| frame.saturating_sub(layer.stamps[i]) <= age)
                && (points[i] - self.center).amax() <= half
        });
        if found.len() < k {
            return Err(MapError::NotEnoughNeighbors {
                wanted: k,
                found: found.len(),
            });
        }
        Ok(found.into_iter().map(|n| points[n.index]).collect())
    }

    pub fn knn_edges(&self, query: &Vector3<f64>, k: usize) -> Result<Vec<Vector3<f64>>, MapError> {
        self.knn(FeatureKind::Edge, query, k)
    }

    pub fn knn_planars(
        &self,
        query: &Vector3<f64>,
        k: usize,
    ) -> Result<Vec<Vector3<f64>>, MapError> {
        self.knn(FeatureKind::Planar, query, k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapConfig {
    pub cell_size: f64,
    pub features: FeatureMapConfig,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self::indoor()
    }
}

impl MapConfig {
    pub fn indoor() -> Self {
        Self::with_cell_size(0.4)
    }

    pub fn outdoor() -> Self {
        Self::with_cell_size(1.0)
    }

    /// Cell size `c` with a feature downsampling leaf of `c / 2`.
    pub fn with_cell_size(cell_size: f64) -> Self {
        Self {
            cell_size,
            features: FeatureMapConfig {
                downsample_leaf: cell_size / 2.0,
                ..Default::default()
            },
        }
    }
}

/// Everything the front-end matches against.
#[derive(Debug, Clone)]
pub struct MapState {
    pub intensity: VoxelIntensityMap,
    pub features: FeatureMap,
}

impl MapState {
    pub fn new(config: &MapConfig) -> Self {
        Self {
            intensity: VoxelIntensityMap::new(config.cell_size),
            features: FeatureMap::new(config.features),
        }
    }

    /// Adds a scan accepted at `pose`: every point updates its intensity cell
    /// and the features join the downsampled clouds.
    pub fn insert_scan(&mut self, scan: &Scan, pose: &Pose, features: &FeatureSet) {
        self.features.set_frame(scan.frame_index as u64);
        self.features.set_center(pose.translation);
        for p in &scan.points {
            self.intensity
                .update_cell(&pose.apply(&p.position), p.calibrated_intensity);
        }
        for p in &features.edges {
            self.features.insert(FeatureKind::Edge, pose.apply(&p.position));
        }
        for p in &features.planars {
            self.features
                .insert(FeatureKind::Planar, pose.apply(&p.position));
        }
    }

    /// Moves the matching window and age reference to a new frame.
    pub fn begin_frame(&mut self, frame_index: usize, predicted: &Pose) {
        self.features.set_frame(frame_index as u64);
        self.features.set_center(predicted.translation);
    }
}
