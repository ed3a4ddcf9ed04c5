//! Trimmed point-to-plane ICP.
//!
//! The registration pipeline mirrors what the error-model network is
//! trained against: normals from the `normal_k` nearest points before
//! subsampling, seeded random decimation of both clouds, one-way nearest
//! neighbor matching, trimming of the worst matches by point-to-plane
//! distance, and a linearized point-to-plane solve with the pose updated
//! by left multiplication with the exponential of the increment. Steps
//! are only accepted when they do not increase the trimmed residual, so
//! the final residual never exceeds the residual at the initial guess.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pointcloud::{
    estimate_normals, random_subsample, CloudError, FilteredPair, PointCloud, SpatialIndex,
};
use crate::se3::{exp_map, Matrix6, Pose, Twist, Vector6};
use crate::seeding::derive_seed;

#[derive(Debug, Error)]
pub enum IcpError {
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error("invalid ICP configuration: {0}")]
    Config(String),
    #[error("only {have} matches survive trimming; need at least 6")]
    TooFewMatches { have: usize },
    #[error("point-to-plane system is rank deficient ({} null directions)", null_space.len())]
    RankDeficient {
        /// Minimum-norm least-squares increment on the observable subspace.
        increment: Twist,
        /// Orthonormal basis of the unobservable twist directions.
        null_space: Vec<Vector6>,
    },
    #[error("key-value config: {0}")]
    KvFile(String),
}

/// Registration configuration. Reads from a plain-text `key = value` file;
/// every default is overridable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcpConfig {
    pub max_iterations: usize,
    /// Convergence threshold on the rotational increment norm (radians).
    pub rotation_epsilon: f64,
    /// Convergence threshold on the translational increment norm (meters).
    pub translation_epsilon: f64,
    /// Fraction of worst matches dropped by point-to-plane distance.
    pub trim_ratio: f64,
    pub subsample_size: usize,
    pub normal_k: usize,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iterations: 40,
            rotation_epsilon: 1e-4,
            translation_epsilon: 1e-4,
            trim_ratio: 0.15,
            subsample_size: 2048,
            normal_k: 10,
        }
    }
}

impl IcpConfig {
    pub fn validate(&self) -> Result<(), IcpError> {
        if !(0.0..1.0).contains(&self.trim_ratio) {
            return Err(IcpError::Config(format!("trim_ratio {} not in [0, 1)", self.trim_ratio)));
        }
        if self.rotation_epsilon <= 0.0 || self.translation_epsilon <= 0.0 {
            return Err(IcpError::Config("epsilons must be positive".into()));
        }
        if self.max_iterations == 0 || self.subsample_size < 6 || self.normal_k == 0 {
            return Err(IcpError::Config("degenerate iteration/size limits".into()));
        }
        Ok(())
    }

    /// Parses a `key = value` file (one pair per line, `#` comments).
    pub fn from_kv_file(path: &std::path::Path) -> Result<Self, IcpError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| IcpError::KvFile(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| IcpError::KvFile(format!("line {}: missing '='", lineno + 1)))?;
            let key = key.trim();
            let value = value.trim();
            let bad = |e: String| IcpError::KvFile(format!("line {}: {e}", lineno + 1));
            match key {
                "max_iterations" => cfg.max_iterations = value.parse().map_err(|e| bad(format!("{e}")))?,
                "rotation_epsilon" => cfg.rotation_epsilon = value.parse().map_err(|e| bad(format!("{e}")))?,
                "translation_epsilon" => cfg.translation_epsilon = value.parse().map_err(|e| bad(format!("{e}")))?,
                "trim_ratio" => cfg.trim_ratio = value.parse().map_err(|e| bad(format!("{e}")))?,
                "subsample_size" => cfg.subsample_size = value.parse().map_err(|e| bad(format!("{e}")))?,
                "normal_k" => cfg.normal_k = value.parse().map_err(|e| bad(format!("{e}")))?,
                other => return Err(bad(format!("unknown key '{other}'"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Why a registration was flagged as failed.
#[derive(Clone, Debug, PartialEq)]
pub enum IcpFailure {
    /// The normal equations lost rank; the unobservable directions are kept
    /// as a diagnostic for underconstrained scenes.
    RankDeficient { null_space: Vec<Vector6> },
    /// No step improved the residual before the iteration budget ran out.
    Stalled,
}

#[derive(Clone, Debug)]
pub struct IcpResult {
    pub estimate: Pose,
    pub iterations: usize,
    pub converged: bool,
    /// Trimmed RMS point-to-plane distance at the estimate (meters).
    pub final_residual: f64,
    pub failure: Option<IcpFailure>,
}

/// One reading-to-reference correspondence for the point-to-plane solve.
#[derive(Clone, Copy, Debug)]
pub struct PlaneMatch {
    /// Reading point already transformed by the current pose iterate.
    pub point: Vector3<f64>,
    /// Matched reference point.
    pub target: Vector3<f64>,
    /// Unit normal at the reference point.
    pub normal: Vector3<f64>,
}

impl PlaneMatch {
    fn residual(&self) -> f64 {
        self.normal.dot(&(self.point - self.target))
    }

    /// Jacobian row of the residual w.r.t. a left-multiplied increment.
    fn jacobian(&self) -> Vector6 {
        let lever = self.point.cross(&self.normal);
        Vector6::new(
            self.normal[0], self.normal[1], self.normal[2], lever[0], lever[1], lever[2],
        )
    }
}

fn trim_matches(matches: &[PlaneMatch], trim_ratio: f64) -> Vec<PlaneMatch> {
    let drop = (matches.len() as f64 * trim_ratio).floor() as usize;
    let keep = matches.len() - drop;
    let mut order: Vec<(f64, usize)> =
        matches.iter().enumerate().map(|(i, m)| (m.residual().abs(), i)).collect();
    order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.truncate(keep);
    order.sort_unstable_by_key(|&(_, i)| i);
    order.into_iter().map(|(_, i)| matches[i]).collect()
}

const RANK_EIGEN_RATIO: f64 = 1e-10;

/// Solves the linearized point-to-plane least squares over the matches
/// surviving trimming and returns the tangent-space increment (to be
/// applied as `exp(increment) * T`). A rank-deficient system is an error
/// carrying the null-space directions and the minimum-norm solution.
pub fn point_to_plane_step(matches: &[PlaneMatch], trim_ratio: f64) -> Result<Twist, IcpError> {
    let kept = trim_matches(matches, trim_ratio);
    if kept.len() < 6 {
        return Err(IcpError::TooFewMatches { have: kept.len() });
    }
    let mut normal_matrix = Matrix6::zeros();
    let mut rhs = Vector6::zeros();
    for m in &kept {
        let j = m.jacobian();
        normal_matrix += j * j.transpose();
        rhs += j * (-m.residual());
    }
    if let Some(chol) = nalgebra::Cholesky::new(normal_matrix) {
        return Ok(Twist::from_vector(&chol.solve(&rhs)));
    }
    // Singular system: diagnose the unobservable directions and solve on
    // the observable subspace.
    let eig = nalgebra::SymmetricEigen::new(normal_matrix);
    let max_eig = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let mut null_space = Vec::new();
    let mut solution = Vector6::zeros();
    for i in 0..6 {
        let lambda = eig.eigenvalues[i];
        let v = eig.eigenvectors.column(i).into_owned();
        if lambda <= RANK_EIGEN_RATIO * max_eig.max(1e-300) {
            null_space.push(v);
        } else {
            solution += v * (v.dot(&rhs) / lambda);
        }
    }
    Err(IcpError::RankDeficient { increment: Twist::from_vector(&solution), null_space })
}

fn ensure_normals(cloud: &PointCloud, k: usize) -> Result<PointCloud, IcpError> {
    if cloud.normals().is_some() {
        Ok(cloud.clone())
    } else {
        Ok(estimate_normals(cloud, k)?)
    }
}

struct Matcher<'a> {
    reading: &'a PointCloud,
    reference: &'a PointCloud,
    index: SpatialIndex,
}

impl<'a> Matcher<'a> {
    fn new(reading: &'a PointCloud, reference: &'a PointCloud) -> Result<Self, IcpError> {
        Ok(Self { reading, reference, index: SpatialIndex::build(reference)? })
    }

    fn matches_at(&self, pose: &Pose) -> Vec<PlaneMatch> {
        let normals = self.reference.normals().expect("reference normals present");
        self.reading
            .points()
            .par_iter()
            .map(|p| {
                let moved = pose.apply(p);
                let nn = self.index.knn(&moved, 1)[0];
                PlaneMatch {
                    point: moved,
                    target: self.reference.points()[nn.index],
                    normal: normals[nn.index],
                }
            })
            .collect()
    }

    fn trimmed_rms(&self, matches: &[PlaneMatch], trim_ratio: f64) -> f64 {
        let kept = trim_matches(matches, trim_ratio);
        if kept.is_empty() {
            return 0.0;
        }
        let ss: f64 = kept.iter().map(|m| m.residual().powi(2)).sum();
        (ss / kept.len() as f64).sqrt()
    }
}

const MAX_BACKTRACKS: usize = 4;

/// Runs the full registration pipeline and returns the estimate together
/// with the exact decimated pair the optimizer consumed (the network
/// input). Deterministic given clouds, guess, config and seed.
pub fn register(
    reading: &PointCloud,
    reference: &PointCloud,
    initial_guess: &Pose,
    cfg: &IcpConfig,
    seed: u64,
) -> Result<(IcpResult, FilteredPair), IcpError> {
    cfg.validate()?;
    if reading.len() < cfg.subsample_size || reference.len() < cfg.subsample_size {
        return Err(IcpError::Cloud(CloudError::TooFewPoints {
            have: reading.len().min(reference.len()),
            need: cfg.subsample_size,
        }));
    }
    let reading_full = ensure_normals(reading, cfg.normal_k)?;
    let reference_full = ensure_normals(reference, cfg.normal_k)?;

    // The same derived stream decimates both clouds, so identical inputs
    // get identical subsets.
    let sub_seed = derive_seed(seed, "icp-subsample", 0);
    let reading_dec = random_subsample(&reading_full, cfg.subsample_size, sub_seed)?;
    let reference_dec = random_subsample(&reference_full, cfg.subsample_size, sub_seed)?;
    let pair = FilteredPair::new(reading_dec, reference_dec, cfg.subsample_size)?;

    let matcher = Matcher::new(&pair.reading, &pair.reference)?;
    let mut pose = *initial_guess;
    let mut matches = matcher.matches_at(&pose);
    let mut residual = matcher.trimmed_rms(&matches, cfg.trim_ratio);
    let mut result = IcpResult {
        estimate: pose,
        iterations: 0,
        converged: false,
        final_residual: residual,
        failure: None,
    };

    for iter in 0..cfg.max_iterations {
        result.iterations = iter + 1;
        let step = match point_to_plane_step(&matches, cfg.trim_ratio) {
            Ok(step) => step,
            Err(IcpError::RankDeficient { null_space, .. }) => {
                result.failure = Some(IcpFailure::RankDeficient { null_space });
                break;
            }
            Err(e) => return Err(e),
        };

        // Backtracking acceptance: only keep steps that do not worsen the
        // trimmed residual under re-matching.
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_BACKTRACKS {
            let delta = Twist::new(step.rho * scale, step.phi * scale);
            let candidate = exp_map(&delta).compose(&pose);
            let cand_matches = matcher.matches_at(&candidate);
            let cand_res = matcher.trimmed_rms(&cand_matches, cfg.trim_ratio);
            if cand_res <= residual {
                accepted = Some((delta, candidate, cand_matches, cand_res));
                break;
            }
            scale *= 0.5;
        }
        let Some((delta, candidate, cand_matches, cand_res)) = accepted else {
            // No scale of the step improves the residual: the iterate sits
            // at a local minimum under re-matching. If even the smallest
            // tried step was below the epsilons, that is convergence at
            // the configured resolution; otherwise the solver is stuck.
            let min_scale = 0.5f64.powi(MAX_BACKTRACKS as i32);
            if step.rho.norm() * min_scale < cfg.translation_epsilon
                && step.phi.norm() * min_scale < cfg.rotation_epsilon
            {
                result.converged = true;
            } else {
                result.failure = Some(IcpFailure::Stalled);
            }
            break;
        };
        pose = candidate;
        matches = cand_matches;
        residual = cand_res;
        result.estimate = pose;
        result.final_residual = residual;
        if delta.rho.norm() < cfg.translation_epsilon && delta.phi.norm() < cfg.rotation_epsilon {
            result.converged = true;
            break;
        }
    }
    Ok((result, pair))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from_seed;
    use rand::Rng;

    #[test]
    fn config_validation() {
        let mut cfg = IcpConfig::default();
        cfg.trim_ratio = 1.0;
        assert!(cfg.validate().is_err());
        cfg = IcpConfig::default();
        cfg.rotation_epsilon = 0.0;
        assert!(cfg.validate().is_err());
        assert!(IcpConfig::default().validate().is_ok());
    }

    #[test]
    fn kv_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("icp.cfg");
        std::fs::write(
            &path,
            "# comment\nmax_iterations = 12\ntrim_ratio = 0.2\nsubsample_size = 256\n",
        )
        .unwrap();
        let cfg = IcpConfig::from_kv_file(&path).unwrap();
        assert_eq!(cfg.max_iterations, 12);
        assert_eq!(cfg.trim_ratio, 0.2);
        assert_eq!(cfg.subsample_size, 256);
        assert_eq!(cfg.normal_k, 10);

        std::fs::write(&path, "unknown_key = 3\n").unwrap();
        assert!(IcpConfig::from_kv_file(&path).is_err());
    }

    #[test]
    fn zero_residuals_give_zero_increment() {
        let mut rng = rng_from_seed(1);
        let matches: Vec<PlaneMatch> = (0..50)
            .map(|_| {
                let p = Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0));
                let n = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
                PlaneMatch { point: p, target: p, normal: n }
            })
            .collect();
        let step = point_to_plane_step(&matches, 0.0).unwrap();
        assert!(step.as_vector().norm() < 1e-12);
    }

    #[test]
    fn plane_shift_is_rank_deficient_with_z_increment() {
        // Symmetric grid on z = 0, reading lifted by +0.1.
        let mut matches = Vec::new();
        for i in -5i32..=5 {
            for j in -5i32..=5 {
                let x = i as f64 * 0.4;
                let y = j as f64 * 0.4;
                matches.push(PlaneMatch {
                    point: Vector3::new(x, y, 0.1),
                    target: Vector3::new(x, y, 0.0),
                    normal: Vector3::new(0.0, 0.0, 1.0),
                });
            }
        }
        let err = point_to_plane_step(&matches, 0.0).unwrap_err();
        match err {
            IcpError::RankDeficient { increment, null_space } => {
                assert!((increment.rho[2] + 0.1).abs() < 1e-9, "rho_z {}", increment.rho[2]);
                assert_eq!(null_space.len(), 3);
                // x/y translations must be unobservable.
                for dir in [Vector6::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0), Vector6::new(0.0, 1.0, 0.0, 0.0, 0.0, 0.0)] {
                    let proj: f64 = null_space.iter().map(|v| v.dot(&dir).powi(2)).sum();
                    assert!((proj - 1.0).abs() < 1e-9, "direction not in null space");
                }
            }
            other => panic!("expected RankDeficient, got {other:?}"),
        }
    }

    #[test]
    fn full_rank_step_matches_svd_oracle() {
        let mut rng = rng_from_seed(2);
        for _ in 0..20 {
            let matches: Vec<PlaneMatch> = (0..100)
                .map(|_| {
                    let p = Vector3::from_fn(|_, _| rng.random_range(-3.0..3.0));
                    let q = p + Vector3::from_fn(|_, _| rng.random_range(-0.05..0.05));
                    let n = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
                    PlaneMatch { point: p, target: q, normal: n }
                })
                .collect();
            let step = point_to_plane_step(&matches, 0.0).unwrap().as_vector();

            let mut a = nalgebra::DMatrix::<f64>::zeros(matches.len(), 6);
            let mut b = nalgebra::DVector::<f64>::zeros(matches.len());
            for (r, m) in matches.iter().enumerate() {
                let j = m.jacobian();
                for c in 0..6 {
                    a[(r, c)] = j[c];
                }
                b[r] = -m.residual();
            }
            let oracle = a.svd(true, true).solve(&b, 1e-12).unwrap();
            let rel = (step - Vector6::from_iterator(oracle.iter().cloned())).norm()
                / step.norm().max(1e-12);
            assert!(rel < 1e-8, "relative error {rel:.3e}");
        }
    }

    #[test]
    fn trimming_drops_worst_matches() {
        let mut matches = Vec::new();
        for i in 0..10 {
            matches.push(PlaneMatch {
                point: Vector3::new(i as f64, 0.0, if i < 8 { 0.0 } else { 5.0 }),
                target: Vector3::new(i as f64, 0.0, 0.0),
                normal: Vector3::new(0.0, 0.0, 1.0),
            });
        }
        let kept = trim_matches(&matches, 0.2);
        assert_eq!(kept.len(), 8);
        assert!(kept.iter().all(|m| m.residual().abs() < 1e-12));
    }

    fn planar_box_cloud(n: usize, seed: u64) -> PointCloud {
        // Points on the inside faces of a box; gives full-rank geometry.
        let mut rng = rng_from_seed(seed);
        let mut pts = Vec::with_capacity(n);
        for _ in 0..n {
            let u = rng.random_range(-4.0..4.0);
            let v = rng.random_range(-4.0..4.0);
            match rng.random_range(0..5u32) {
                0 => pts.push(Vector3::new(u, v, 0.0)),
                1 => pts.push(Vector3::new(u, -4.0, (v + 4.0) / 4.0)),
                2 => pts.push(Vector3::new(u, 4.0, (v + 4.0) / 4.0)),
                3 => pts.push(Vector3::new(-4.0, u, (v + 4.0) / 4.0)),
                _ => pts.push(Vector3::new(4.0, u, (v + 4.0) / 4.0)),
            }
        }
        PointCloud::new(pts, "box").unwrap()
    }

    #[test]
    fn identical_clouds_fixed_point() {
        let cloud = planar_box_cloud(800, 3);
        let cfg = IcpConfig { subsample_size: 512, ..IcpConfig::default() };
        let (res, pair) = register(&cloud, &cloud, &Pose::identity(), &cfg, 7).unwrap();
        assert!(res.converged);
        assert!(res.estimate.is_close(&Pose::identity(), 1e-6));
        assert_eq!(pair.reading.points(), pair.reference.points());
    }

    #[test]
    fn register_is_deterministic() {
        let cloud = planar_box_cloud(800, 4);
        let moved = cloud.transformed(&exp_map(&Twist::new(
            Vector3::new(0.05, -0.02, 0.01),
            Vector3::new(0.005, 0.01, -0.008),
        )));
        let cfg = IcpConfig { subsample_size: 512, ..IcpConfig::default() };
        let (r1, p1) = register(&moved, &cloud, &Pose::identity(), &cfg, 9).unwrap();
        let (r2, p2) = register(&moved, &cloud, &Pose::identity(), &cfg, 9).unwrap();
        assert_eq!(r1.estimate, r2.estimate);
        assert_eq!(p1, p2);
        assert_eq!(r1.final_residual, r2.final_residual);
    }

    #[test]
    fn register_recovers_small_motion() {
        // reading = reference displaced by a known transform; registration
        // should undo it: estimate maps reading frame onto reference frame.
        let cloud = planar_box_cloud(2000, 5);
        let truth = exp_map(&Twist::new(
            Vector3::new(0.08, -0.05, 0.03),
            Vector3::new(0.01, -0.02, 0.015),
        ));
        // Reading points are reference points expressed in a frame moved by
        // `truth`: x_read = truth^-1 * x_ref.
        let reading = cloud.transformed(&truth.inverse());
        let cfg = IcpConfig { subsample_size: 1024, ..IcpConfig::default() };
        let (res, _) = register(&reading, &cloud, &Pose::identity(), &cfg, 11).unwrap();
        let err = crate::se3::icp_error(&res.estimate, &truth).unwrap();
        assert!(err.rho.norm() < 0.01, "translation error {}", err.rho.norm());
        assert!(err.phi.norm() < 0.005, "rotation error {}", err.phi.norm());
        assert!(res.final_residual <= res.final_residual.max(1e-12));
    }

    #[test]
    fn too_few_points_rejected() {
        let cloud = planar_box_cloud(100, 6);
        let cfg = IcpConfig::default(); // wants 2048
        assert!(matches!(
            register(&cloud, &cloud, &Pose::identity(), &cfg, 0),
            Err(IcpError::Cloud(CloudError::TooFewPoints { .. }))
        ));
    }
}
