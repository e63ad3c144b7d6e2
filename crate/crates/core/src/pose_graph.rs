//! Keyframe pose graph with odometry and loop edges, optimized by damped
//! Gauss-Newton over the block-sparse normal equations.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{Matrix6, Vector6};
use thiserror::Error;

use crate::geometry::Pose;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("edge connects node {0} to itself")]
    SelfLoop(usize),
    #[error("odometry edge must join consecutive nodes, got {0} -> {1}")]
    NonConsecutive(usize, usize),
    #[error("node {0} is not connected to node 0")]
    DisconnectedGraph(usize),
    #[error("cost increased after repeated damping escalation")]
    SolverDiverged,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphNode {
    pub id: usize,
    pub pose: Pose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Odometry,
    Loop,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphEdge {
    pub from: usize,
    pub to: usize,
    /// Pose of `to` expressed in the frame of `from`.
    pub measurement: Pose,
    pub kind: EdgeKind,
    pub information_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphSettings {
    pub max_iterations: usize,
    /// Huber threshold on the norm of loop-edge residuals.
    pub huber_delta: f64,
    pub initial_damping: f64,
    /// Stop once the largest increment component falls below this.
    pub tolerance: f64,
}

impl Default for GraphSettings {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            huber_delta: 0.1,
            initial_damping: 1e-6,
            tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizeReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PoseGraph {
    nodes: Vec<GraphNode>,
    edges: Vec<GraphEdge>,
}

/// `log(M⁻¹ A⁻¹ B)`.
pub fn edge_residual(measurement: &Pose, a: &Pose, b: &Pose) -> Vector6<f64> {
    (measurement.inverse() * (a.inverse() * *b)).log()
}

impl PoseGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a node and returns its id (ids are dense from 0).
    pub fn add_node(&mut self, pose: Pose) -> usize {
        let id = self.nodes.len();
        self.nodes.push(GraphNode { id, pose });
        id
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[GraphEdge] {
        &self.edges
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.nodes.iter().map(|n| n.pose).collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, from: usize, to: usize) -> Result<(), GraphError> {
        for id in [from, to] {
            if id >= self.nodes.len() {
                return Err(GraphError::UnknownNode(id));
            }
        }
        if from == to {
            return Err(GraphError::SelfLoop(from));
        }
        Ok(())
    }

    pub fn add_odometry_edge(&mut self, from: usize, to: usize, measured: Pose) -> Result<(), GraphError> {
        self.check(from, to)?;
        if to != from + 1 {
            return Err(GraphError::NonConsecutive(from, to));
        }
        self.edges.push(GraphEdge {
            from,
            to,
            measurement: measured,
            kind: EdgeKind::Odometry,
            information_scale: 1.0,
        });
        Ok(())
    }

    pub fn add_loop_edge(&mut self, from: usize, to: usize, measured: Pose) -> Result<(), GraphError> {
        self.check(from, to)?;
        self.edges.push(GraphEdge {
            from,
            to,
            measurement: measured,
            kind: EdgeKind::Loop,
            information_scale: 1.0,
        });
        Ok(())
    }

    fn edge_cost(&self, e: &GraphEdge, poses: &[Pose], delta: f64) -> (f64, f64) {
        let r = edge_residual(&e.measurement, &poses[e.from], &poses[e.to]);
        let n = r.norm();
        let (c, w) = if e.kind == EdgeKind::Loop && n > delta {
            (delta * (n - 0.5 * delta), delta / n)
        } else {
            (0.5 * n * n, 1.0)
        };
        (e.information_scale * c, e.information_scale * w)
    }

    fn cost_of(&self, poses: &[Pose], delta: f64) -> f64 {
        self.edges.iter().map(|e| self.edge_cost(e, poses, delta).0).sum()
    }

    /// Total robust cost at the current estimate.
    pub fn cost(&self, settings: &GraphSettings) -> f64 {
        self.cost_of(&self.poses(), settings.huber_delta)
    }

    fn check_connected(&self) -> Result<(), GraphError> {
        let n = self.nodes.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for e in &self.edges {
            let (a, b) = (find(&mut parent, e.from), find(&mut parent, e.to));
            parent[a] = b;
        }
        let root = find(&mut parent, 0);
        for i in 1..n {
            if find(&mut parent, i) != root {
                return Err(GraphError::DisconnectedGraph(i));
            }
        }
        Ok(())
    }

    /// Minimizes the summed edge costs with node 0 held fixed.
    pub fn optimize(&mut self, settings: &GraphSettings) -> Result<OptimizeReport, GraphError> {
        let delta = settings.huber_delta;
        let mut poses = self.poses();
        let initial_cost = self.cost_of(&poses, delta);
        if self.nodes.len() <= 1 || self.edges.is_empty() {
            return Ok(OptimizeReport {
                initial_cost,
                final_cost: initial_cost,
                iterations: 0,
            });
        }
        self.check_connected()?;

        let mut cost = initial_cost;
        let mut lambda = settings.initial_damping;
        let mut iterations = 0;
        while iterations < settings.max_iterations {
            iterations += 1;
            let system = self.normal_equations(&poses, delta);
            let mut rejected = 0;
            let step = loop {
                let dx = system.solve(lambda);
                let candidate = apply_step(&poses, &dx);
                let new_cost = self.cost_of(&candidate, delta);
                if new_cost <= cost {
                    poses = candidate;
                    cost = new_cost;
                    lambda = (lambda * 0.1).max(1e-12);
                    break dx;
                }
                let small = dx.iter().all(|v| v.amax() < settings.tolerance);
                if small {
                    break dx;
                }
                if !new_cost.is_finite() {
                    return Err(GraphError::SolverDiverged);
                }
                rejected += 1;
                lambda = lambda.max(1e-9) * 10.0;
                // no descent left at this linearization
                if rejected >= 8 {
                    break Vec::new();
                }
            };
            if step.iter().all(|v| v.amax() < settings.tolerance) {
                break;
            }
        }
        for (node, pose) in self.nodes.iter_mut().zip(&poses).skip(1) {
            node.pose = *pose;
        }
        Ok(OptimizeReport {
            initial_cost,
            final_cost: cost,
            iterations,
        })
    }

    fn normal_equations(&self, poses: &[Pose], delta: f64) -> BlockSystem {
        let n = poses.len() - 1;
        let mut sys = BlockSystem::new(n);
        for e in &self.edges {
            let (_, w) = self.edge_cost(e, poses, delta);
            let r = edge_residual(&e.measurement, &poses[e.from], &poses[e.to]);
            let ja = numeric_jacobian(|d| edge_residual(&e.measurement, &poses[e.from].retract(d), &poses[e.to]));
            let jb = numeric_jacobian(|d| edge_residual(&e.measurement, &poses[e.from], &poses[e.to].retract(d)));
            let blocks = [(e.from, ja), (e.to, jb)];
            for (i, ji) in &blocks {
                if *i == 0 {
                    continue;
                }
                sys.b[i - 1] += w * ji.transpose() * r;
                for (j, jj) in &blocks {
                    if *j == 0 {
                        continue;
                    }
                    *sys.block(i - 1, j - 1) += w * ji.transpose() * jj;
                }
            }
        }
        sys
    }

    /// One `EDGE from to tx ty tz qx qy qz qw kind` line per edge.
    pub fn dump_edges(&self) -> String {
        let mut out = String::new();
        for e in &self.edges {
            let t = e.measurement.translation;
            let q = e.measurement.rotation.quaternion();
            let kind = match e.kind {
                EdgeKind::Odometry => "odometry",
                EdgeKind::Loop => "loop",
            };
            let _ = writeln!(
                out,
                "EDGE {} {} {} {} {} {} {} {} {} {}",
                e.from, e.to, t.x, t.y, t.z, q.i, q.j, q.k, q.w, kind
            );
        }
        out
    }
}

fn numeric_jacobian(f: impl Fn(&Vector6<f64>) -> Vector6<f64>) -> Matrix6<f64> {
    let h = 1e-6;
    let mut j = Matrix6::zeros();
    for k in 0..6 {
        let mut d = Vector6::zeros();
        d[k] = h;
        let col = (f(&d) - f(&-d)) / (2.0 * h);
        j.set_column(k, &col);
    }
    j
}

fn apply_step(poses: &[Pose], dx: &[Vector6<f64>]) -> Vec<Pose> {
    let mut out = Vec::with_capacity(poses.len());
    out.push(poses[0]);
    for (p, d) in poses[1..].iter().zip(dx) {
        out.push(p.retract(d));
    }
    out
}

/// Symmetric block-sparse system `H x = -b` over the free nodes.
struct BlockSystem {
    rows: Vec<BTreeMap<usize, Matrix6<f64>>>,
    b: Vec<Vector6<f64>>,
}

impl BlockSystem {
    fn new(n: usize) -> Self {
        Self {
            rows: vec![BTreeMap::new(); n],
            b: vec![Vector6::zeros(); n],
        }
    }

    fn block(&mut self, i: usize, j: usize) -> &mut Matrix6<f64> {
        self.rows[i].entry(j).or_insert_with(Matrix6::zeros)
    }

    fn diag(&self, i: usize) -> Matrix6<f64> {
        self.rows[i].get(&i).copied().unwrap_or_else(Matrix6::zeros)
    }

    fn mul(&self, x: &[Vector6<f64>], mu: &[Vector6<f64>]) -> Vec<Vector6<f64>> {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let mut acc = mu[i].component_mul(&x[i]);
                for (j, m) in row {
                    acc += m * x[*j];
                }
                acc
            })
            .collect()
    }

    /// Preconditioned conjugate gradients on `(H + λ diag H) x = -b`, with
    /// block-Jacobi preconditioning.
    fn solve(&self, lambda: f64) -> Vec<Vector6<f64>> {
        let n = self.rows.len();
        let mu: Vec<Vector6<f64>> = (0..n)
            .map(|i| self.diag(i).diagonal().map(|d| lambda * d.max(1e-9)))
            .collect();
        let precond: Vec<Matrix6<f64>> = (0..n)
            .map(|i| {
                let d = self.diag(i) + Matrix6::from_diagonal(&mu[i]);
                d.cholesky()
                    .map(|c| c.inverse())
                    .unwrap_or_else(|| Matrix6::from_diagonal(&d.diagonal().map(|v| 1.0 / v.max(1e-12))))
            })
            .collect();
        let dot = |a: &[Vector6<f64>], b: &[Vector6<f64>]| a.iter().zip(b).map(|(x, y)| x.dot(y)).sum::<f64>();

        let mut x = vec![Vector6::zeros(); n];
        let mut r: Vec<Vector6<f64>> = self.b.iter().map(|v| -v).collect();
        let mut z: Vec<Vector6<f64>> = r.iter().zip(&precond).map(|(v, m)| m * v).collect();
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        let norm0 = dot(&r, &r).sqrt();
        if norm0 == 0.0 {
            return x;
        }
        for _ in 0..(60 * n).max(200) {
            let ap = self.mul(&p, &mu);
            let alpha = rz / dot(&p, &ap);
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            if dot(&r, &r).sqrt() <= 1e-12 * norm0 {
                break;
            }
            z = r.iter().zip(&precond).map(|(v, m)| m * v).collect();
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        x
    }
}

/// Left-composes every non-keyframe pose with the correction
/// `optimized ∘ before⁻¹` of the latest keyframe at or before it.
///
/// `keyframe_frames[k]` is the frame index of keyframe `k`, ascending.
pub fn propagate_correction(
    before: &[Pose],
    optimized: &[Pose],
    keyframe_frames: &[usize],
    frame_poses: &[Pose],
) -> Vec<Pose> {
    let corrections: Vec<Pose> = before
        .iter()
        .zip(optimized)
        .map(|(b, o)| *o * b.inverse())
        .collect();
    let mut k = 0;
    frame_poses
        .iter()
        .enumerate()
        .map(|(f, pose)| {
            while k + 1 < keyframe_frames.len() && keyframe_frames[k + 1] <= f {
                k += 1;
            }
            match corrections.get(k) {
                Some(c) if keyframe_frames.first().is_some_and(|&f0| f0 <= f) => *c * *pose,
                _ => *pose,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let v = Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0));
        Pose::exp(&v)
    }

    #[test]
    fn consistent_measurement_has_zero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let (a, b) = (random_pose(&mut rng), random_pose(&mut rng));
            let m = a.inverse() * b;
            assert!(edge_residual(&m, &a, &b).amax() < 1e-12);
        }
    }

    #[test]
    fn edge_validation() {
        let mut g = PoseGraph::new();
        g.add_node(Pose::identity());
        g.add_node(Pose::from_translation(1.0, 0.0, 0.0));
        assert_eq!(
            g.add_odometry_edge(0, 5, Pose::identity()),
            Err(GraphError::UnknownNode(5))
        );
        assert_eq!(g.add_loop_edge(1, 1, Pose::identity()), Err(GraphError::SelfLoop(1)));
        g.add_odometry_edge(0, 1, Pose::from_translation(1.0, 0.0, 0.0)).unwrap();
        assert_abs_diff_eq!(g.cost(&GraphSettings::default()), 0.0, epsilon = 1e-20);
    }

    #[test]
    fn consistent_chain_is_already_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = PoseGraph::new();
        let mut poses = vec![Pose::identity()];
        g.add_node(poses[0]);
        for i in 0..10 {
            let step = Pose::exp(&(Vector6::from_fn(|_, _| rng.random_range(-0.3..0.3))));
            let next = poses[i] * step;
            poses.push(next);
            g.add_node(next);
            g.add_odometry_edge(i, i + 1, step).unwrap();
        }
        let report = g.optimize(&GraphSettings::default()).unwrap();
        assert!(report.final_cost < 1e-18);
        for (n, p) in g.nodes().iter().zip(&poses) {
            assert!(n.pose.max_abs_diff(p) < 1e-9);
        }
    }

    #[test]
    fn single_node_and_disconnected() {
        let mut g = PoseGraph::new();
        g.add_node(Pose::identity());
        let r = g.optimize(&GraphSettings::default()).unwrap();
        assert_eq!(r.final_cost, 0.0);
        g.add_node(Pose::identity());
        g.add_node(Pose::identity());
        g.add_odometry_edge(1, 2, Pose::identity()).unwrap();
        assert_eq!(g.optimize(&GraphSettings::default()), Err(GraphError::DisconnectedGraph(1)));
    }

    #[test]
    fn loop_edge_removes_drift() {
        // 40 m straight out-and-back with a 1% per-edge translation bias
        let mut g = PoseGraph::new();
        let truth: Vec<Pose> = (0..=40)
            .map(|i| {
                let i = i as f64;
                if i <= 20.0 {
                    Pose::from_translation(i, 0.0, 0.0)
                } else {
                    Pose::from_xyz_yaw(40.0 - i, 1.0, 0.0, std::f64::consts::PI)
                }
            })
            .collect();
        let mut est = vec![truth[0]];
        for i in 0..40 {
            let mut m = truth[i].inverse() * truth[i + 1];
            m.translation *= 1.01;
            est.push(est[i] * m);
        }
        for p in &est {
            g.add_node(*p);
        }
        for i in 0..40 {
            g.add_odometry_edge(i, i + 1, est[i].inverse() * est[i + 1]).unwrap();
        }
        g.add_loop_edge(0, 40, truth[0].inverse() * truth[40]).unwrap();
        let before = (est[40].translation - truth[40].translation).norm();
        let first = g.nodes()[0].pose;
        let report = g.optimize(&GraphSettings::default()).unwrap();
        let after = (g.nodes()[40].pose.translation - truth[40].translation).norm();
        assert!(report.final_cost <= report.initial_cost);
        assert!(after < 0.2 * before, "before {before} after {after}");
        assert_eq!(g.nodes()[0].pose, first);
    }

    #[test]
    fn correction_propagation() {
        let kf_before = vec![Pose::identity(), Pose::from_translation(2.0, 0.0, 0.0)];
        let frames = vec![Pose::identity(), Pose::from_translation(1.0, 0.0, 0.0), Pose::from_translation(2.0, 0.0, 0.0), Pose::from_translation(3.0, 0.0, 0.0)];
        let same = propagate_correction(&kf_before, &kf_before, &[0, 2], &frames);
        assert_eq!(same, frames);
        let g = Pose::from_xyz_yaw(0.5, -1.0, 0.0, 0.3);
        let moved: Vec<Pose> = kf_before.iter().map(|p| g * *p).collect();
        let out = propagate_correction(&kf_before, &moved, &[0, 2], &frames);
        for (o, f) in out.iter().zip(&frames) {
            assert!(o.max_abs_diff(&(g * *f)) < 1e-12);
        }
    }

    #[test]
    fn dump_format() {
        let mut g = PoseGraph::new();
        g.add_node(Pose::identity());
        g.add_node(Pose::identity());
        g.add_loop_edge(0, 1, Pose::identity()).unwrap();
        assert_eq!(g.dump_edges(), "EDGE 0 1 0 0 0 0 0 0 1 loop\n");
    }
}
