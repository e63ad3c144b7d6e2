//! Exact nearest-neighbour indices over 3-D points.
//!
//! [`KdTree`] is a static tree rebuilt per scan. [`VoxelHashIndex`] supports
//! incremental insertion and is what the global feature maps use. Both break
//! distance ties by the smaller point index.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use nalgebra::Vector3;

/// Query result: squared distance and index of the point in the indexed set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub dist2: f64,
    pub index: usize,
}

impl Eq for Neighbor {}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Bounded max-heap keeping the k best neighbours seen so far.
struct KBest {
    k: usize,
    heap: BinaryHeap<Neighbor>,
}

impl KBest {
    fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    fn offer(&mut self, n: Neighbor) {
        if self.heap.len() < self.k {
            self.heap.push(n);
        } else if let Some(worst) = self.heap.peek() {
            if n < *worst {
                self.heap.pop();
                self.heap.push(n);
            }
        }
    }

    fn full(&self) -> bool {
        self.heap.len() >= self.k
    }

    fn worst_dist2(&self) -> f64 {
        if self.full() {
            self.heap.peek().map_or(f64::INFINITY, |n| n.dist2)
        } else {
            f64::INFINITY
        }
    }

    fn into_sorted(self) -> Vec<Neighbor> {
        self.heap.into_sorted_vec()
    }
}

const LEAF_SIZE: usize = 12;

enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Static k-d tree.
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn build(points: Vec<Vector3<f64>>) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::new();
        if !points.is_empty() {
            let n = order.len();
            build_node(&points, &mut order, 0, n, &mut nodes);
        }
        Self {
            points,
            order,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> &Vector3<f64> {
        &self.points[index]
    }

    /// The `k` nearest points to `query`, ascending by (distance, index).
    pub fn knn(&self, query: &Vector3<f64>, k: usize) -> Vec<Neighbor> {
        self.knn_filtered(query, k, |_| true)
    }

    /// As [`KdTree::knn`] but only considering indices for which `keep` holds.
    pub fn knn_filtered(
        &self,
        query: &Vector3<f64>,
        k: usize,
        keep: impl Fn(usize) -> bool,
    ) -> Vec<Neighbor> {
        if k == 0 || self.nodes.is_empty() {
            return Vec::new();
        }
        let mut best = KBest::new(k);
        self.search(0, query, &keep, &mut best);
        best.into_sorted()
    }

    fn search(
        &self,
        node: usize,
        query: &Vector3<f64>,
        keep: &impl Fn(usize) -> bool,
        best: &mut KBest,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &idx in &self.order[start..end] {
                    if keep(idx) {
                        let dist2 = (self.points[idx] - query).norm_squared();
                        best.offer(Neighbor { dist2, index: idx });
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = query[axis] - value;
                let (near, far) = if diff <= 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, query, keep, best);
                // ties must still be explored so the smaller index can win
                if diff * diff <= best.worst_dist2() {
                    self.search(far, query, keep, best);
                }
            }
        }
    }
}

fn build_node(
    points: &[Vector3<f64>],
    order: &mut [usize],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let id = nodes.len();
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    let slice = &order[start..end];
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for &i in slice {
        lo = lo.inf(&points[i]);
        hi = hi.sup(&points[i]);
    }
    let axis = (hi - lo).imax();
    let mid = (end - start) / 2;
    order[start..end].select_nth_unstable_by(mid, |&a, &b| {
        points[a][axis].total_cmp(&points[b][axis])
    });
    let value = points[order[start + mid]][axis];
    nodes.push(Node::Leaf { start, end });
    let left = build_node(points, order, start, start + mid, nodes);
    let right = build_node(points, order, start + mid, end, nodes);
    nodes[id] = Node::Split {
        axis,
        value,
        left,
        right,
    };
    id
}

type CellKey = (i64, i64, i64);

/// Hash grid of buckets, append-only, for k-NN within a bounded radius.
#[derive(Debug, Clone)]
pub struct VoxelHashIndex {
    bucket_size: f64,
    buckets: HashMap<CellKey, Vec<usize>>,
    points: Vec<Vector3<f64>>,
}

impl VoxelHashIndex {
    pub fn new(bucket_size: f64) -> Self {
        assert!(bucket_size > 0.0, "bucket size must be positive");
        Self {
            bucket_size,
            buckets: HashMap::new(),
            points: Vec::new(),
        }
    }

    fn key(&self, p: &Vector3<f64>) -> CellKey {
        (
            (p.x / self.bucket_size).floor() as i64,
            (p.y / self.bucket_size).floor() as i64,
            (p.z / self.bucket_size).floor() as i64,
        )
    }

    /// Inserts a point and returns its index.
    pub fn insert(&mut self, p: Vector3<f64>) -> usize {
        let idx = self.points.len();
        let key = self.key(&p);
        self.buckets.entry(key).or_default().push(idx);
        self.points.push(p);
        idx
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    /// Exact k nearest neighbours among points within `radius` of `query` for
    /// which `keep` holds, ascending by (distance, index). May return fewer
    /// than `k`.
    pub fn knn_within(
        &self,
        query: &Vector3<f64>,
        k: usize,
        radius: f64,
        keep: impl Fn(usize) -> bool,
    ) -> Vec<Neighbor> {
        let mut best = KBest::new(k);
        if k == 0 {
            return Vec::new();
        }
        let r2 = radius * radius;
        let center = self.key(query);
        let max_shell = (radius / self.bucket_size).ceil() as i64 + 1;
        for shell in 0..=max_shell {
            // every point in a shell >= s is at least (s-1)*bucket away
            let shell_min = ((shell - 1).max(0) as f64) * self.bucket_size;
            if best.full() && shell_min * shell_min > best.worst_dist2() {
                break;
            }
            if shell_min > radius {
                break;
            }
            for dx in -shell..=shell {
                for dy in -shell..=shell {
                    for dz in -shell..=shell {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != shell {
                            continue;
                        }
                        let key = (center.0 + dx, center.1 + dy, center.2 + dz);
                        if let Some(bucket) = self.buckets.get(&key) {
                            for &idx in bucket {
                                if !keep(idx) {
                                    continue;
                                }
                                let dist2 = (self.points[idx] - query).norm_squared();
                                if dist2 <= r2 {
                                    best.offer(Neighbor { dist2, index: idx });
                                }
                            }
                        }
                    }
                }
            }
        }
        best.into_sorted()
    }
}
