//! Exact k-nearest-neighbor search over 3D positions.
//!
//! A static kd-tree with median splits along the widest axis. Candidates are
//! ordered by `(squared distance, index)`, so results are identical to a
//! sorted exhaustive scan, ties included.

use std::collections::BinaryHeap;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Immutable kd-tree over a fixed point set. Safe to query from many threads.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    points: Vec<[f64; 3]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
    k_default: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    id: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.d2.total_cmp(&other.d2).then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Squared Euclidean distance, summed in x, y, z order.
#[inline]
pub fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

impl NeighborIndex {
    pub const DEFAULT_K: usize = 64;

    pub fn build(cloud: &PointCloud) -> Result<Self> {
        Self::from_positions(cloud.positions())
    }

    pub fn from_positions(positions: &[Vector3<f64>]) -> Result<Self> {
        if positions.len() < 2 {
            return Err(Error::TooFewPoints(positions.len()));
        }
        let points: Vec<[f64; 3]> = positions.iter().map(|p| [p.x, p.y, p.z]).collect();
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::new();
        build_node(&points, &mut order, 0, points.len(), &mut nodes);
        Ok(NeighborIndex {
            points,
            order,
            nodes,
            k_default: Self::DEFAULT_K,
        })
    }

    pub fn with_k_default(mut self, k: usize) -> Self {
        self.k_default = k.max(1);
        self
    }

    pub fn k_default(&self) -> usize {
        self.k_default
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The `min(k, N-1)` nearest other points of `point_id`, nearest first,
    /// ties broken by lower index.
    pub fn knn(&self, point_id: usize, k: usize) -> Result<Vec<usize>> {
        if point_id >= self.points.len() {
            return Err(Error::IdOutOfRange {
                id: point_id,
                len: self.points.len(),
            });
        }
        let q = self.points[point_id];
        Ok(self.search(&q, k, Some(point_id)))
    }

    /// The `min(k, N)` nearest indexed points to an arbitrary query location.
    pub fn knn_point(&self, query: &Vector3<f64>, k: usize) -> Vec<usize> {
        self.search(&[query.x, query.y, query.z], k, None)
    }

    /// Index of the closest indexed point; lower index wins on ties.
    pub fn nearest(&self, query: &Vector3<f64>) -> usize {
        self.knn_point(query, 1)[0]
    }

    fn search(&self, q: &[f64; 3], k: usize, exclude: Option<usize>) -> Vec<usize> {
        let available = self.points.len() - usize::from(exclude.is_some());
        let k = k.min(available);
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search_node(0, q, k, exclude, &mut heap);
        let mut out = heap.into_sorted_vec();
        out.truncate(k);
        out.into_iter().map(|c| c.id).collect()
    }

    fn search_node(
        &self,
        node: usize,
        q: &[f64; 3],
        k: usize,
        exclude: Option<usize>,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &id in &self.order[start..end] {
                    if Some(id) == exclude {
                        continue;
                    }
                    let c = Candidate {
                        d2: dist2(q, &self.points[id]),
                        id,
                    };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search_node(near, q, k, exclude, heap);
                // Equal distances must still be visited: a lower index on the
                // far side can displace the current worst candidate.
                if heap.len() < k || diff * diff <= heap.peek().unwrap().d2 {
                    self.search_node(far, q, k, exclude, heap);
                }
            }
        }
    }
}

fn build_node(
    points: &[[f64; 3]],
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
    let slice = &mut order[start..end];
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in slice.iter() {
        for a in 0..3 {
            lo[a] = lo[a].min(points[i][a]);
            hi[a] = hi[a].max(points[i][a]);
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])).then(b.cmp(&a)))
        .unwrap();
    if hi[axis] - lo[axis] == 0.0 {
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |&a, &b| {
        points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
    });
    let value = points[slice[mid]][axis];
    // Points left of `mid` have coordinate <= value and points right of it
    // have coordinate >= value, so the split plane separates the halves.
    nodes.push(Node::Leaf { start: 0, end: 0 });
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
