//! Point-cloud container, spatial index, normal estimation and the
//! subsampling filters shared by the ICP chain and the network input path.

mod filters;
mod io;
mod kdtree;

pub use filters::{estimate_normals, estimate_normals_from, farthest_point_sample, random_subsample};
pub use io::{read_ply, read_velodyne_bin, write_ply, write_velodyne_bin};
pub use kdtree::{brute_force_knn, Neighbor, SpatialIndex};

use nalgebra::Vector3;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("point cloud is empty")]
    Empty,
    #[error("point cloud has non-finite coordinates at index {0}")]
    NonFinite(usize),
    #[error("normals length {normals} does not match point count {points}")]
    NormalsMismatch { normals: usize, points: usize },
    #[error("normal at index {0} is not unit length")]
    NonUnitNormal(usize),
    #[error("cloud has {have} points, need at least {need}")]
    TooFewPoints { have: usize, need: usize },
    #[error("filtered pair clouds must have exactly {expected} points (reading {reading}, reference {reference})")]
    PairSizeMismatch { expected: usize, reading: usize, reference: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {format} file {path}: {reason}")]
    Malformed { format: &'static str, path: String, reason: String },
}

/// A 3D point cloud with optional per-point unit normals.
///
/// Normals carry a reliability flag: degenerate neighborhoods produce an
/// arbitrary normal that downstream consumers may want to treat with care.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Vector3<f64>>,
    normals: Option<Vec<Vector3<f64>>>,
    normal_reliable: Option<Vec<bool>>,
    source_id: String,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>, source_id: impl Into<String>) -> Result<Self, CloudError> {
        for (i, p) in points.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(CloudError::NonFinite(i));
            }
        }
        Ok(Self { points, normals: None, normal_reliable: None, source_id: source_id.into() })
    }

    pub fn with_normals(
        mut self,
        normals: Vec<Vector3<f64>>,
        reliable: Option<Vec<bool>>,
    ) -> Result<Self, CloudError> {
        if normals.len() != self.points.len() {
            return Err(CloudError::NormalsMismatch {
                normals: normals.len(),
                points: self.points.len(),
            });
        }
        for (i, n) in normals.iter().enumerate() {
            if (n.norm() - 1.0).abs() > 1e-6 {
                return Err(CloudError::NonUnitNormal(i));
            }
        }
        if let Some(r) = &reliable {
            if r.len() != self.points.len() {
                return Err(CloudError::NormalsMismatch { normals: r.len(), points: self.points.len() });
            }
        }
        self.normals = Some(normals);
        self.normal_reliable = reliable;
        Ok(self)
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

    pub fn normals(&self) -> Option<&[Vector3<f64>]> {
        self.normals.as_deref()
    }

    pub fn normal_reliability(&self) -> Option<&[bool]> {
        self.normal_reliable.as_deref()
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    /// Selects a subset of points by index, carrying normals and flags along.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| indices.iter().map(|&i| ns[i]).collect()),
            normal_reliable: self
                .normal_reliable
                .as_ref()
                .map(|rs| indices.iter().map(|&i| rs[i]).collect()),
            source_id: self.source_id.clone(),
        }
    }

    /// Returns the cloud rigidly transformed by `pose`; normals rotate.
    pub fn transformed(&self, pose: &crate::se3::Pose) -> Self {
        Self {
            points: self.points.iter().map(|p| pose.apply(p)).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| ns.iter().map(|n| pose.rotation() * n).collect()),
            normal_reliable: self.normal_reliable.clone(),
            source_id: self.source_id.clone(),
        }
    }
}

/// The decimated cloud pair consumed by both the ICP minimizer and the
/// network: reading first, reference second.
#[derive(Clone, Debug, PartialEq)]
pub struct FilteredPair {
    pub reading: PointCloud,
    pub reference: PointCloud,
}

impl FilteredPair {
    pub fn new(
        reading: PointCloud,
        reference: PointCloud,
        expected_size: usize,
    ) -> Result<Self, CloudError> {
        if reading.len() != expected_size || reference.len() != expected_size {
            return Err(CloudError::PairSizeMismatch {
                expected: expected_size,
                reading: reading.len(),
                reference: reference.len(),
            });
        }
        Ok(Self { reading, reference })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_points() {
        let pts = vec![Vector3::new(0.0, f64::NAN, 0.0)];
        assert!(matches!(PointCloud::new(pts, "t"), Err(CloudError::NonFinite(0))));
    }

    #[test]
    fn rejects_non_unit_normals() {
        let cloud = PointCloud::new(vec![Vector3::zeros()], "t").unwrap();
        let r = cloud.with_normals(vec![Vector3::new(0.0, 0.0, 0.5)], None);
        assert!(matches!(r, Err(CloudError::NonUnitNormal(0))));
    }

    #[test]
    fn select_carries_normals() {
        let cloud = PointCloud::new(
            vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0)],
            "t",
        )
        .unwrap()
        .with_normals(
            vec![Vector3::new(0.0, 0.0, 1.0), Vector3::new(1.0, 0.0, 0.0)],
            Some(vec![true, false]),
        )
        .unwrap();
        let sub = cloud.select(&[1]);
        assert_eq!(sub.points()[0], Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(sub.normals().unwrap()[0], Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(sub.normal_reliability().unwrap()[0], false);
    }

    #[test]
    fn pair_size_enforced() {
        let a = PointCloud::new(vec![Vector3::zeros(); 4], "a").unwrap();
        let b = PointCloud::new(vec![Vector3::zeros(); 3], "b").unwrap();
        assert!(FilteredPair::new(a.clone(), b, 4).is_err());
        let b4 = PointCloud::new(vec![Vector3::zeros(); 4], "b").unwrap();
        assert!(FilteredPair::new(a, b4, 4).is_ok());
    }
}
