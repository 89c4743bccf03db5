use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::Point3;

use super::PointCloud;
use crate::error::{Error, Result};

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
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

/// Balanced kd-tree over a snapshot of a point cloud.
///
/// Radius queries use the strict test `|q - c|^2 < r^2` and return indices in
/// ascending order, so results are identical to a linear scan using the same
/// comparison. The index is immutable once built and can be shared between
/// threads.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<Point3<f64>>,
    perm: Vec<usize>,
    nodes: Vec<Node>,
}

/// Max-heap entry ordered by (squared distance, index).
#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl SpatialIndex {
    pub fn build(cloud: &PointCloud) -> Result<Self> {
        Self::from_points(cloud.points())
    }

    pub fn from_points(points: &[Point3<f64>]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut index = Self {
            points: points.to_vec(),
            perm: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        index.build_node(0, points.len());
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let axis = self.widest_axis(start, end);
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.perm[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
        });
        let value = self.points[self.perm[mid]][axis];
        // Placeholder, patched once the children exist.
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    fn widest_axis(&self, start: usize, end: usize) -> usize {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.perm[start..end] {
            let p = &self.points[i];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0)
    }

    /// Indices `i` with `|p_i - center| < r`, ascending.
    pub fn radius_query(&self, center: &Point3<f64>, r: f64) -> Vec<usize> {
        let mut out = Vec::new();
        if r > 0.0 {
            self.radius_recurse(0, center, r * r, &mut out);
        }
        out.sort_unstable();
        out
    }

    fn radius_recurse(&self, node: usize, center: &Point3<f64>, r2: f64, out: &mut Vec<usize>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.perm[start..end] {
                    if (self.points[i] - center).norm_squared() < r2 {
                        out.push(i);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = center[axis] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.radius_recurse(near, center, r2, out);
                if diff * diff < r2 {
                    self.radius_recurse(far, center, r2, out);
                }
            }
        }
    }

    /// The `k` nearest points as `(index, squared distance)`, ordered by
    /// distance then index.
    pub fn knn(&self, center: &Point3<f64>, k: usize) -> Vec<(usize, f64)> {
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_recurse(0, center, k, &mut heap);
        heap.into_sorted_vec()
            .into_iter()
            .map(|c| (c.index, c.dist2))
            .collect()
    }

    fn knn_recurse(
        &self,
        node: usize,
        center: &Point3<f64>,
        k: usize,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &index in &self.perm[start..end] {
                    let cand = Candidate {
                        dist2: (self.points[index] - center).norm_squared(),
                        index,
                    };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if let Some(worst) = heap.peek() {
                        if cand < *worst {
                            heap.pop();
                            heap.push(cand);
                        }
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = center[axis] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.knn_recurse(near, center, k, heap);
                let visit_far =
                    heap.len() < k || heap.peek().is_some_and(|worst| diff * diff <= worst.dist2);
                if visit_far {
                    self.knn_recurse(far, center, k, heap);
                }
            }
        }
    }

    /// Nearest point as `(index, squared distance)`; ties go to the lowest index.
    pub fn nearest(&self, center: &Point3<f64>) -> (usize, f64) {
        self.knn(center, 1)[0]
    }
}
