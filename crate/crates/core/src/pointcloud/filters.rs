//! Normal estimation and the subsampling filters.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use super::{CloudError, PointCloud, SpatialIndex};
use crate::seeding::rng_from_seed;

/// Ratio of smallest to middle scatter eigenvalue above which a
/// neighborhood is considered degenerate (no well-defined normal).
const DEGENERATE_EIGEN_RATIO: f64 = 0.9;

/// Estimates per-point normals from the `k` nearest neighbors, oriented
/// toward the origin (the sensor position for scans in sensor frame).
pub fn estimate_normals(cloud: &PointCloud, k: usize) -> Result<PointCloud, CloudError> {
    estimate_normals_from(cloud, k, &Vector3::zeros())
}

/// Normal per point is the smallest-eigenvalue eigenvector of the
/// neighborhood scatter matrix, flipped so it points toward `sensor`.
/// Degenerate neighborhoods (rank < 2 scatter) keep an arbitrary unit
/// normal and are flagged unreliable.
pub fn estimate_normals_from(
    cloud: &PointCloud,
    k: usize,
    sensor: &Vector3<f64>,
) -> Result<PointCloud, CloudError> {
    if cloud.len() < k + 1 {
        return Err(CloudError::TooFewPoints { have: cloud.len(), need: k + 1 });
    }
    let index = SpatialIndex::build(cloud)?;
    let points = cloud.points();
    let mut normals = Vec::with_capacity(points.len());
    let mut reliable = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        // Neighborhood: the point itself plus its k nearest others.
        let mut hood: Vec<usize> = Vec::with_capacity(k + 1);
        hood.push(i);
        for n in index.knn(p, k + 1) {
            if n.index != i && hood.len() < k + 1 {
                hood.push(n.index);
            }
        }
        let centroid: Vector3<f64> =
            hood.iter().map(|&j| points[j]).sum::<Vector3<f64>>() / hood.len() as f64;
        let mut scatter = Matrix3::zeros();
        for &j in &hood {
            let d = points[j] - centroid;
            scatter += d * d.transpose();
        }
        let eig = nalgebra::SymmetricEigen::new(scatter);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let (l0, l1) = (eig.eigenvalues[order[0]].max(0.0), eig.eigenvalues[order[1]].max(0.0));
        let scale = eig.eigenvalues[order[2]].abs().max(1e-300);
        let degenerate = l1 <= 1e-12 * scale || l0 / l1.max(1e-300) > DEGENERATE_EIGEN_RATIO;
        let mut n = eig.eigenvectors.column(order[0]).into_owned();
        let norm = n.norm();
        if norm < 1e-12 {
            n = Vector3::new(0.0, 0.0, 1.0);
        } else {
            n /= norm;
        }
        if n.dot(&(sensor - p)) < 0.0 {
            n = -n;
        }
        normals.push(n);
        reliable.push(!degenerate);
    }
    cloud.clone().with_normals(normals, Some(reliable))
}

/// Uniform subsample without replacement; deterministic for a seed. Using
/// `size == cloud.len()` yields a seeded permutation of the input.
pub fn random_subsample(cloud: &PointCloud, size: usize, seed: u64) -> Result<PointCloud, CloudError> {
    if cloud.len() < size {
        return Err(CloudError::TooFewPoints { have: cloud.len(), need: size });
    }
    let mut rng = rng_from_seed(seed);
    let mut indices: Vec<usize> = (0..cloud.len()).collect();
    for i in 0..size {
        let j = rng.random_range(i..indices.len());
        indices.swap(i, j);
    }
    indices.truncate(size);
    Ok(cloud.select(&indices))
}

/// Greedy farthest-point selection starting from a seeded random index.
/// Returned indices are distinct and in selection order.
pub fn farthest_point_sample(
    cloud: &PointCloud,
    size: usize,
    seed: u64,
) -> Result<Vec<usize>, CloudError> {
    if cloud.len() < size {
        return Err(CloudError::TooFewPoints { have: cloud.len(), need: size });
    }
    if size == 0 {
        return Ok(Vec::new());
    }
    let points = cloud.points();
    let start = rng_from_seed(seed).random_range(0..points.len());
    let mut selected = Vec::with_capacity(size);
    let mut min_dist: Vec<f64> = points.iter().map(|p| (p - points[start]).norm_squared()).collect();
    selected.push(start);
    while selected.len() < size {
        let mut best = 0usize;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_dist.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        selected.push(best);
        for (i, d) in min_dist.iter_mut().enumerate() {
            let nd = (points[i] - points[best]).norm_squared();
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(selected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::{derive_seed, rng_from_seed};
    use crate::se3::{exp_map, Twist};

    fn plane_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = rng_from_seed(seed);
        let pts = (0..n)
            .map(|_| Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 0.0))
            .collect();
        PointCloud::new(pts, "plane").unwrap()
    }

    #[test]
    fn planar_normals_are_vertical() {
        let cloud = plane_cloud(300, 1);
        let with_n = estimate_normals_from(&cloud, 10, &Vector3::new(0.0, 0.0, 10.0)).unwrap();
        for (n, r) in with_n.normals().unwrap().iter().zip(with_n.normal_reliability().unwrap()) {
            assert!(*r, "planar neighborhood flagged unreliable");
            assert!((n - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-6);
        }
    }

    #[test]
    fn sphere_normals_are_radial() {
        let mut rng = rng_from_seed(2);
        let radius = 5.0;
        let pts: Vec<Vector3<f64>> = (0..6000)
            .map(|_| {
                let v = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
                v * radius
            })
            .collect();
        let cloud = PointCloud::new(pts.clone(), "sphere").unwrap();
        // Sensor at the center: normals should point inward (toward origin).
        let with_n = estimate_normals(&cloud, 10).unwrap();
        let max_angle_deg = with_n
            .normals()
            .unwrap()
            .iter()
            .zip(&pts)
            .map(|(n, p)| {
                let radial = -p.normalize();
                n.dot(&radial).clamp(-1.0, 1.0).acos().to_degrees()
            })
            .fold(0.0f64, f64::max);
        assert!(max_angle_deg < 5.0, "max normal deviation {max_angle_deg:.2} deg");
    }

    #[test]
    fn collinear_points_flagged_unreliable() {
        let pts: Vec<Vector3<f64>> = (0..30).map(|i| Vector3::new(i as f64 * 0.1, 0.0, 0.0)).collect();
        let cloud = PointCloud::new(pts, "line").unwrap();
        let with_n = estimate_normals(&cloud, 10).unwrap();
        assert!(with_n.normal_reliability().unwrap().iter().all(|r| !r));
    }

    #[test]
    fn normals_rotate_with_rigid_transform() {
        let cloud = {
            let mut rng = rng_from_seed(3);
            // A gently curved surface so normals are well defined and varied.
            let pts = (0..500)
                .map(|_| {
                    let x: f64 = rng.random_range(-3.0..3.0);
                    let y: f64 = rng.random_range(-3.0..3.0);
                    Vector3::new(x, y, 0.05 * (x * x - y * y))
                })
                .collect();
            PointCloud::new(pts, "quad").unwrap()
        };
        let pose = exp_map(&Twist::new(
            Vector3::new(0.5, -0.3, 0.8),
            Vector3::new(0.3, 0.2, -0.4),
        ));
        let sensor = Vector3::new(0.0, 0.0, 50.0);
        let a = estimate_normals_from(&cloud, 10, &sensor).unwrap();
        let b = estimate_normals_from(&cloud.transformed(&pose), 10, &pose.apply(&sensor)).unwrap();
        for (na, nb) in a.normals().unwrap().iter().zip(b.normals().unwrap()) {
            let expected = pose.rotation() * na;
            let aligned = if expected.dot(nb) < 0.0 { -nb } else { *nb };
            assert!((expected - aligned).norm() < 1e-6);
        }
    }

    #[test]
    fn subsample_is_seed_deterministic_and_unique() {
        let cloud = plane_cloud(1000, 4);
        let a = random_subsample(&cloud, 128, 42).unwrap();
        let b = random_subsample(&cloud, 128, 42).unwrap();
        assert_eq!(a, b);
        let c = random_subsample(&cloud, 128, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn subsample_full_size_is_permutation() {
        let cloud = plane_cloud(50, 5);
        let full = random_subsample(&cloud, 50, 7).unwrap();
        let mut orig: Vec<_> = cloud.points().iter().map(|p| (p[0].to_bits(), p[1].to_bits())).collect();
        let mut got: Vec<_> = full.points().iter().map(|p| (p[0].to_bits(), p[1].to_bits())).collect();
        orig.sort();
        got.sort();
        assert_eq!(orig, got);
    }

    #[test]
    fn subsample_indices_unique_on_large_cloud() {
        let mut rng = rng_from_seed(6);
        let pts: Vec<Vector3<f64>> =
            (0..100_000).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let cloud = PointCloud::new(pts, "big").unwrap();
        let sub = random_subsample(&cloud, 2048, 11).unwrap();
        let mut keys: Vec<u64> = sub
            .points()
            .iter()
            .map(|p| p[0].to_bits() ^ p[1].to_bits().rotate_left(21) ^ p[2].to_bits().rotate_left(42))
            .collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 2048);
    }

    #[test]
    fn subsample_too_small_errors() {
        let cloud = plane_cloud(10, 7);
        assert!(random_subsample(&cloud, 11, 0).is_err());
    }

    #[test]
    fn fps_full_size_returns_all_indices() {
        let cloud = plane_cloud(20, 8);
        let mut idx = farthest_point_sample(&cloud, 20, 3).unwrap();
        idx.sort();
        assert_eq!(idx, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn fps_square_picks_diagonal() {
        let pts = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(1.0, 1.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        ];
        let cloud = PointCloud::new(pts.clone(), "sq").unwrap();
        for seed in 0..8 {
            let idx = farthest_point_sample(&cloud, 2, seed).unwrap();
            let d = (pts[idx[0]] - pts[idx[1]]).norm();
            assert!((d - 2.0f64.sqrt()).abs() < 1e-12, "picked non-diagonal corners");
        }
    }

    #[test]
    fn fps_spreads_better_than_random() {
        let min_pairwise = |cloud: &PointCloud, idx: &[usize]| -> f64 {
            let mut best = f64::INFINITY;
            for i in 0..idx.len() {
                for j in (i + 1)..idx.len() {
                    best = best.min((cloud.points()[idx[i]] - cloud.points()[idx[j]]).norm());
                }
            }
            best
        };
        let mut fps_sum = 0.0;
        let mut rnd_sum = 0.0;
        for trial in 0..50u64 {
            let mut rng = rng_from_seed(derive_seed(100, "fps-trial", trial));
            let pts: Vec<Vector3<f64>> =
                (0..200).map(|_| Vector3::from_fn(|_, _| rng.random_range(0.0..1.0))).collect();
            let cloud = PointCloud::new(pts, "cube").unwrap();
            let fps = farthest_point_sample(&cloud, 20, trial).unwrap();
            let rnd = random_subsample(&cloud, 20, trial).unwrap();
            let rnd_idx: Vec<usize> = (0..20).collect();
            fps_sum += min_pairwise(&cloud, &fps);
            rnd_sum += min_pairwise(&rnd, &rnd_idx);
        }
        assert!(
            fps_sum > rnd_sum,
            "farthest-point sampling did not spread better: {fps_sum:.3} vs {rnd_sum:.3}"
        );
    }
}
