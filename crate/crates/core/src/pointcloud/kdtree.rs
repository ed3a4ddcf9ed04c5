//! A kd-tree over 3D points for exact k-nearest-neighbor and radius
//! queries.
//!
//! Queries return results sorted by (distance, index), which makes them
//! directly comparable to a brute-force scan and keeps every consumer of
//! the index deterministic. The tree is immutable after construction and
//! safe to query from multiple threads.

use nalgebra::Vector3;

use super::{CloudError, PointCloud};

/// One query result: index into the original cloud plus Euclidean distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

struct Node {
    point: u32,
    axis: u8,
    left: i32,
    right: i32,
}

const NO_CHILD: i32 = -1;

pub struct SpatialIndex {
    points: Vec<Vector3<f64>>,
    nodes: Vec<Node>,
    root: i32,
}

impl SpatialIndex {
    /// Builds the index; empty clouds are rejected.
    pub fn build(cloud: &PointCloud) -> Result<Self, CloudError> {
        Self::from_points(cloud.points())
    }

    pub fn from_points(points: &[Vector3<f64>]) -> Result<Self, CloudError> {
        if points.is_empty() {
            return Err(CloudError::Empty);
        }
        let mut idx: Vec<u32> = (0..points.len() as u32).collect();
        let mut tree = Self { points: points.to_vec(), nodes: Vec::with_capacity(points.len()), root: NO_CHILD };
        let root = tree.build_rec(&mut idx);
        tree.root = root;
        Ok(tree)
    }

    fn build_rec(&mut self, idx: &mut [u32]) -> i32 {
        if idx.is_empty() {
            return NO_CHILD;
        }
        // Split along the axis of largest extent; median point at the node.
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in idx.iter() {
            let p = &self.points[i as usize];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let axis = (0..3).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b]))).unwrap();
        let mid = idx.len() / 2;
        let points = &self.points;
        idx.select_nth_unstable_by(mid, |&a, &b| {
            points[a as usize][axis]
                .total_cmp(&points[b as usize][axis])
                .then(a.cmp(&b))
        });
        let point = idx[mid];
        let (left_slice, rest) = idx.split_at_mut(mid);
        let right_slice = &mut rest[1..];
        let left = self.build_rec(left_slice);
        let right = self.build_rec(right_slice);
        self.nodes.push(Node { point, axis: axis as u8, left, right });
        (self.nodes.len() - 1) as i32
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The k nearest neighbors of `query`, sorted by (distance, index).
    /// Ties at the k-th distance resolve toward smaller indices.
    pub fn knn(&self, query: &Vector3<f64>, k: usize) -> Vec<Neighbor> {
        if k == 0 {
            return Vec::new();
        }
        let mut best: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
        self.knn_rec(self.root, query, k, &mut best);
        best.iter()
            .map(|&(d2, i)| Neighbor { index: i as usize, distance: d2.sqrt() })
            .collect()
    }

    fn knn_rec(&self, node: i32, query: &Vector3<f64>, k: usize, best: &mut Vec<(f64, u32)>) {
        if node == NO_CHILD {
            return;
        }
        let n = &self.nodes[node as usize];
        let p = &self.points[n.point as usize];
        let d2 = (p - query).norm_squared();
        let cand = (d2, n.point);
        let pos = best.partition_point(|e| (e.0, e.1) < (cand.0, cand.1));
        if pos < k {
            best.insert(pos, cand);
            best.truncate(k);
        }
        let axis = n.axis as usize;
        let delta = query[axis] - p[axis];
        let (near, far) = if delta < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        self.knn_rec(near, query, k, best);
        let worst = if best.len() < k { f64::INFINITY } else { best[best.len() - 1].0 };
        if delta * delta <= worst {
            self.knn_rec(far, query, k, best);
        }
    }

    /// All points within `radius` (inclusive), sorted by (distance, index).
    pub fn within_radius(&self, query: &Vector3<f64>, radius: f64) -> Vec<Neighbor> {
        let mut out: Vec<(f64, u32)> = Vec::new();
        self.radius_rec(self.root, query, radius * radius, &mut out);
        out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.into_iter()
            .map(|(d2, i)| Neighbor { index: i as usize, distance: d2.sqrt() })
            .collect()
    }

    fn radius_rec(&self, node: i32, query: &Vector3<f64>, r2: f64, out: &mut Vec<(f64, u32)>) {
        if node == NO_CHILD {
            return;
        }
        let n = &self.nodes[node as usize];
        let p = &self.points[n.point as usize];
        let d2 = (p - query).norm_squared();
        if d2 <= r2 {
            out.push((d2, n.point));
        }
        let axis = n.axis as usize;
        let delta = query[axis] - p[axis];
        let (near, far) = if delta < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        self.radius_rec(near, query, r2, out);
        if delta * delta <= r2 {
            self.radius_rec(far, query, r2, out);
        }
    }
}

/// Brute-force k-nearest-neighbor reference with the same ordering
/// contract as [`SpatialIndex::knn`]. Exposed for oracle-style testing.
pub fn brute_force_knn(points: &[Vector3<f64>], query: &Vector3<f64>, k: usize) -> Vec<Neighbor> {
    let mut all: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| ((p - query).norm_squared(), i))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.truncate(k);
    all.into_iter()
        .map(|(d2, i)| Neighbor { index: i, distance: d2.sqrt() })
        .collect()
}
