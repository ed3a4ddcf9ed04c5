//! Labeled registration datasets: perturbed initial guesses, ICP runs,
//! label twists, manifest persistence and sequence-level train/validation
//! splits.
//!
//! Every sample records the seeds that produced it, so any sample is
//! regenerable bit-exactly from the manifest alone.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::icp::{register, IcpConfig, IcpError, IcpFailure};
use crate::pointcloud::{read_ply, read_velodyne_bin, write_ply, CloudError, FilteredPair, PointCloud};
use crate::se3::{exp_map, icp_error, log_map, GeometryError, Pose, Twist, Vector6};
use crate::seeding::{derive_seed, rng_from_seed};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Perturbation floor applied during dataset construction so zero-motion
/// frames still receive a non-degenerate initial-guess distribution.
pub const DATASET_GUESS_FLOOR_RHO: f64 = 0.01;
pub const DATASET_GUESS_FLOOR_PHI: f64 = 0.005;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error(transparent)]
    Icp(#[from] IcpError),
    #[error("sequence needs at least 2 scans, got {0}")]
    SequenceTooShort(usize),
    #[error("scan count {scans} does not match pose count {poses}")]
    CountMismatch { scans: usize, poses: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("invalid guess config: {0}")]
    GuessConfig(String),
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io { path: path.display().to_string(), source }
}

/// Hierarchical tangent-space model of the initial-guess perturbation.
///
/// The per-dimension scale vector is `s = |log(T_true)|`; a bias is drawn
/// as `beta ~ N(0, diag((a s)^2))` and the perturbation as
/// `delta ~ N(beta, diag((b s)^2))`; the guess is `T_true * exp(delta)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialGuessConfig {
    pub a: f64,
    pub b: f64,
    /// Component floor on the translational scales (meters), if any.
    pub floor_rho: Option<f64>,
    /// Component floor on the rotational scales (radians), if any.
    pub floor_phi: Option<f64>,
}

impl Default for InitialGuessConfig {
    fn default() -> Self {
        Self { a: 0.25, b: 0.2, floor_rho: None, floor_phi: None }
    }
}

impl InitialGuessConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.a < 0.0 || self.b < 0.0 {
            return Err(DatasetError::GuessConfig("a and b must be nonnegative".into()));
        }
        Ok(())
    }

    /// The variant used while building datasets: floors filled in when the
    /// caller left them unset.
    pub fn with_dataset_floor(mut self) -> Self {
        self.floor_rho.get_or_insert(DATASET_GUESS_FLOOR_RHO);
        self.floor_phi.get_or_insert(DATASET_GUESS_FLOOR_PHI);
        self
    }
}

/// Samples a perturbed initial guess around the true transform;
/// deterministic for a seed.
pub fn sample_initial_guess(
    t_true: &Pose,
    cfg: &InitialGuessConfig,
    seed: u64,
) -> Result<Pose, DatasetError> {
    cfg.validate()?;
    let xi = log_map(t_true)?.as_vector();
    let mut scale = xi.map(f64::abs);
    if let Some(fr) = cfg.floor_rho {
        for i in 0..3 {
            scale[i] = scale[i].max(fr);
        }
    }
    if let Some(fp) = cfg.floor_phi {
        for i in 3..6 {
            scale[i] = scale[i].max(fp);
        }
    }
    let mut rng = rng_from_seed(seed);
    let mut delta = Vector6::zeros();
    for i in 0..6 {
        let bias: f64 = rng.sample::<f64, _>(StandardNormal) * cfg.a * scale[i];
        delta[i] = bias + rng.sample::<f64, _>(StandardNormal) * cfg.b * scale[i];
    }
    Ok(t_true.compose(&exp_map(&Twist::from_vector(&delta))))
}

/// One labeled registration pair.
#[derive(Clone, Debug)]
pub struct RegistrationSample {
    pub pair: FilteredPair,
    pub estimate: Pose,
    pub ground_truth: Pose,
    pub guess: Pose,
    /// Label twist `log(estimate^-1 * ground_truth)`.
    pub label: Twist,
    pub converged: bool,
    pub failure: Option<String>,
    pub guess_seed: u64,
    pub icp_seed: u64,
    pub sequence: usize,
    pub pair_index: usize,
    pub guess_index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub name: String,
    pub first_sample: usize,
    pub sample_count: usize,
    pub split: Split,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleMeta {
    pub sequence: usize,
    pub pair_index: usize,
    pub guess_index: usize,
    pub reading_ply: String,
    pub reference_ply: String,
    pub estimate: [f64; 12],
    pub ground_truth: [f64; 12],
    pub guess_pose: [f64; 12],
    pub label: [f64; 6],
    pub converged: bool,
    pub failure: Option<String>,
    pub guess_seed: u64,
    pub icp_seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub base_seed: u64,
    pub guesses_per_pair: usize,
    pub icp: IcpConfig,
    pub guess: InitialGuessConfig,
    pub sequences: Vec<SequenceMeta>,
    pub samples: Vec<SampleMeta>,
}

/// In-memory dataset: manifest plus materialized cloud pairs.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<RegistrationSample>,
}

impl Dataset {
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.manifest
            .sequences
            .iter()
            .filter(|s| s.split == split)
            .flat_map(|s| s.first_sample..s.first_sample + s.sample_count)
            .collect()
    }

    /// Converged samples of a split, the ones usable for training.
    pub fn converged_indices(&self, split: Split) -> Vec<usize> {
        self.split_indices(split)
            .into_iter()
            .filter(|&i| self.samples[i].converged)
            .collect()
    }

    pub fn convergence_stats(&self) -> (usize, usize) {
        let converged = self.samples.iter().filter(|s| s.converged).count();
        (converged, self.samples.len() - converged)
    }
}

fn pose_to_row_major(p: &Pose) -> [f64; 12] {
    let mut out = [0.0; 12];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 4 + c] = p.rotation()[(r, c)];
        }
        out[r * 4 + 3] = p.translation()[r];
    }
    out
}

fn pose_from_row_major(v: &[f64; 12]) -> Result<Pose, GeometryError> {
    let rotation = nalgebra::Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
    let translation = nalgebra::Vector3::new(v[3], v[7], v[11]);
    Pose::from_matrix_reproject(rotation, translation)
}

fn twist_to_array(t: &Twist) -> [f64; 6] {
    let v = t.as_vector();
    [v[0], v[1], v[2], v[3], v[4], v[5]]
}

fn twist_from_array(a: &[f64; 6]) -> Twist {
    Twist::from_vector(&Vector6::from_row_slice(a))
}

/// Scans plus ground-truth poses forming one odometry sequence.
pub struct SequenceScans {
    pub name: String,
    pub scans: Vec<(PointCloud, Pose)>,
}

/// Builds a labeled dataset from ground-truth-tagged scan sequences.
///
/// For each consecutive pair `(i, i+1)` the relative truth is
/// `pose_i^-1 * pose_{i+1}`; the reading cloud is scan `i+1` and the
/// reference is scan `i`, so the ICP estimate approximates the relative
/// truth directly. Per-pair seeds derive from the base seed; pairs run in
/// parallel with order-stable assembly. ICP failures are kept with
/// `converged = false`, never silently dropped.
pub fn build_dataset(
    sequences: &[SequenceScans],
    icp_cfg: &IcpConfig,
    guess_cfg: &InitialGuessConfig,
    base_seed: u64,
    guesses_per_pair: usize,
) -> Result<Dataset, DatasetError> {
    icp_cfg.validate()?;
    let guess_cfg = guess_cfg.clone().with_dataset_floor();
    guess_cfg.validate()?;
    let k = guesses_per_pair.max(1);

    let mut jobs = Vec::new();
    for (seq_idx, seq) in sequences.iter().enumerate() {
        if seq.scans.len() < 2 {
            return Err(DatasetError::SequenceTooShort(seq.scans.len()));
        }
        for pair_index in 0..seq.scans.len() - 1 {
            for guess_index in 0..k {
                jobs.push((seq_idx, pair_index, guess_index));
            }
        }
    }

    let samples: Vec<RegistrationSample> = jobs
        .par_iter()
        .map(|&(seq_idx, pair_index, guess_index)| {
            let seq = &sequences[seq_idx];
            let (ref_cloud, ref_pose) = &seq.scans[pair_index];
            let (read_cloud, read_pose) = &seq.scans[pair_index + 1];
            let truth = ref_pose.inverse().compose(read_pose);
            let tag = (seq_idx as u64) << 40 | (pair_index as u64) << 8 | guess_index as u64;
            let guess_seed = derive_seed(base_seed, "guess", tag);
            let icp_seed = derive_seed(base_seed, "icp", tag);
            let guess = sample_initial_guess(&truth, &guess_cfg, guess_seed)?;
            let (res, pair) = register(read_cloud, ref_cloud, &guess, icp_cfg, icp_seed)?;
            let (label, converged, failure) = match icp_error(&res.estimate, &truth) {
                Ok(label) => {
                    let failure = res.failure.as_ref().map(failure_tag);
                    (label, res.converged && failure.is_none(), failure)
                }
                Err(e) => (Twist::zero(), false, Some(format!("label: {e}"))),
            };
            Ok(RegistrationSample {
                pair,
                estimate: res.estimate,
                ground_truth: truth,
                guess,
                label,
                converged,
                failure,
                guess_seed,
                icp_seed,
                sequence: seq_idx,
                pair_index,
                guess_index,
            })
        })
        .collect::<Result<_, DatasetError>>()?;

    let mut sequences_meta = Vec::new();
    let mut cursor = 0;
    for (seq_idx, seq) in sequences.iter().enumerate() {
        let count = samples.iter().filter(|s| s.sequence == seq_idx).count();
        sequences_meta.push(SequenceMeta {
            name: seq.name.clone(),
            first_sample: cursor,
            sample_count: count,
            split: Split::Train,
        });
        cursor += count;
    }

    let sample_meta = samples
        .iter()
        .map(|s| SampleMeta {
            sequence: s.sequence,
            pair_index: s.pair_index,
            guess_index: s.guess_index,
            reading_ply: cloud_file_name(s, "reading"),
            reference_ply: cloud_file_name(s, "reference"),
            estimate: pose_to_row_major(&s.estimate),
            ground_truth: pose_to_row_major(&s.ground_truth),
            guess_pose: pose_to_row_major(&s.guess),
            label: twist_to_array(&s.label),
            converged: s.converged,
            failure: s.failure.clone(),
            guess_seed: s.guess_seed,
            icp_seed: s.icp_seed,
        })
        .collect();

    Ok(Dataset {
        manifest: DatasetManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            base_seed,
            guesses_per_pair: k,
            icp: icp_cfg.clone(),
            guess: guess_cfg,
            sequences: sequences_meta,
            samples: sample_meta,
        },
        samples,
    })
}

fn failure_tag(f: &IcpFailure) -> String {
    match f {
        IcpFailure::RankDeficient { null_space } => {
            format!("rank-deficient ({} null directions)", null_space.len())
        }
        IcpFailure::Stalled => "stalled".into(),
    }
}

fn cloud_file_name(s: &RegistrationSample, role: &str) -> String {
    format!(
        "clouds/seq{:03}_pair{:04}_g{:02}_{}.ply",
        s.sequence, s.pair_index, s.guess_index, role
    )
}

/// Assigns validation status to roughly `val_fraction` of the sequences
/// (never samples) with a seeded shuffle; at least one sequence stays in
/// the training split.
pub fn assign_splits(dataset: &mut Dataset, val_fraction: f64, seed: u64) {
    let n = dataset.manifest.sequences.len();
    if n < 2 || val_fraction <= 0.0 {
        return;
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_from_seed(derive_seed(seed, "split", 0));
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let val_count = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    for seq_meta in dataset.manifest.sequences.iter_mut() {
        seq_meta.split = Split::Train;
    }
    for &idx in order.iter().take(val_count) {
        dataset.manifest.sequences[idx].split = Split::Validation;
    }
}

/// Writes manifest JSON plus the cloud pairs as PLY files.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<(), DatasetError> {
    fs::create_dir_all(dir.join("clouds")).map_err(|e| io_err(dir, e))?;
    for (sample, meta) in dataset.samples.iter().zip(&dataset.manifest.samples) {
        write_ply(&sample.pair.reading, &dir.join(&meta.reading_ply))?;
        write_ply(&sample.pair.reference, &dir.join(&meta.reference_ply))?;
    }
    let json = serde_json::to_string_pretty(&dataset.manifest)
        .map_err(|e| DatasetError::Manifest(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), json).map_err(|e| io_err(dir, e))
}

/// Loads a dataset saved by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&json).map_err(|e| DatasetError::Manifest(e.to_string()))?;
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(DatasetError::Manifest(format!(
            "schema version {} unsupported (expected {MANIFEST_SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    let expected_size = manifest.icp.subsample_size;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for meta in &manifest.samples {
        let reading = read_ply(&dir.join(&meta.reading_ply))?;
        let reference = read_ply(&dir.join(&meta.reference_ply))?;
        samples.push(RegistrationSample {
            pair: FilteredPair::new(reading, reference, expected_size)?,
            estimate: pose_from_row_major(&meta.estimate)?,
            ground_truth: pose_from_row_major(&meta.ground_truth)?,
            guess: pose_from_row_major(&meta.guess_pose)?,
            label: twist_from_array(&meta.label),
            converged: meta.converged,
            failure: meta.failure.clone(),
            guess_seed: meta.guess_seed,
            icp_seed: meta.icp_seed,
            sequence: meta.sequence,
            pair_index: meta.pair_index,
            guess_index: meta.guess_index,
        });
    }
    Ok(Dataset { manifest, samples })
}

/// Loads a KITTI-format sequence: sorted `*.bin` velodyne scans plus a
/// pose file of 3x4 row-major lines. Rotations are re-projected onto
/// SO(3). Scan and pose counts must match.
pub fn load_kitti_sequence(
    scan_dir: &Path,
    pose_file: &Path,
) -> Result<Vec<(PointCloud, Pose)>, DatasetError> {
    let mut scan_paths: Vec<PathBuf> = fs::read_dir(scan_dir)
        .map_err(|e| io_err(scan_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    scan_paths.sort();
    let pose_text = fs::read_to_string(pose_file).map_err(|e| io_err(pose_file, e))?;
    let poses: Vec<Pose> = pose_text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(Pose::from_kitti_line)
        .collect::<Result<_, _>>()?;
    if poses.len() != scan_paths.len() {
        return Err(DatasetError::CountMismatch { scans: scan_paths.len(), poses: poses.len() });
    }
    scan_paths
        .iter()
        .zip(poses)
        .map(|(p, pose)| Ok((read_velodyne_bin(p)?, pose)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    #[test]
    fn guess_zero_ab_returns_truth() {
        let truth = exp_map(&Twist::new(Vector3::new(1.0, 0.2, -0.1), Vector3::new(0.05, 0.0, 0.1)));
        let cfg = InitialGuessConfig { a: 0.0, b: 0.0, floor_rho: None, floor_phi: None };
        let g = sample_initial_guess(&truth, &cfg, 3).unwrap();
        assert!(g.is_close(&truth, 1e-15));
    }

    #[test]
    fn guess_identity_truth_returns_identity_without_floor() {
        let g = sample_initial_guess(&Pose::identity(), &InitialGuessConfig::default(), 5).unwrap();
        assert!(g.is_close(&Pose::identity(), 1e-15));
    }

    #[test]
    fn guess_identity_truth_perturbs_with_floor() {
        let cfg = InitialGuessConfig::default().with_dataset_floor();
        let g = sample_initial_guess(&Pose::identity(), &cfg, 5).unwrap();
        assert!(!g.is_close(&Pose::identity(), 1e-9));
        let xi = log_map(&g).unwrap().as_vector();
        assert!(xi.norm() < 0.2, "floor perturbation should stay small");
    }

    #[test]
    fn guess_std_matches_total_variance_law() {
        // 1 m forward motion: Var(delta_x) = (a^2 + b^2) * 1 => std 0.3202.
        let truth = Pose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let cfg = InitialGuessConfig::default();
        let n = 10_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for seed in 0..n {
            let g = sample_initial_guess(&truth, &cfg, seed).unwrap();
            let dx = log_map(&truth.inverse().compose(&g)).unwrap().rho[0];
            sum += dx;
            sum2 += dx * dx;
        }
        let mean = sum / n as f64;
        let std = (sum2 / n as f64 - mean * mean).sqrt();
        let expected = (0.25f64.powi(2) + 0.2f64.powi(2)).sqrt();
        assert!(
            (std - expected).abs() / expected < 0.10,
            "std {std:.4} vs expected {expected:.4}"
        );
    }

    #[test]
    fn guess_is_seed_deterministic() {
        let truth = Pose::from_translation(Vector3::new(0.5, 0.0, 0.0));
        let cfg = InitialGuessConfig::default();
        let a = sample_initial_guess(&truth, &cfg, 77).unwrap();
        let b = sample_initial_guess(&truth, &cfg, 77).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pose_row_major_round_trip() {
        let p = exp_map(&Twist::new(Vector3::new(0.3, -0.7, 1.1), Vector3::new(0.2, 0.4, -0.1)));
        let back = pose_from_row_major(&pose_to_row_major(&p)).unwrap();
        assert!(p.is_close(&back, 1e-12));
    }

    #[test]
    fn kitti_loader_round_trip_and_errors() {
        use crate::pointcloud::write_velodyne_bin;
        use crate::seeding::rng_from_seed;
        use rand::Rng;

        let dir = tempfile::tempdir().unwrap();
        let scans = dir.path().join("scans");
        fs::create_dir_all(&scans).unwrap();
        let mut rng = rng_from_seed(1);
        let mut clouds = Vec::new();
        for i in 0..2 {
            let pts: Vec<Vector3<f64>> =
                (0..50).map(|_| Vector3::from_fn(|_, _| rng.random_range(-10.0..10.0))).collect();
            let cloud = PointCloud::new(pts, format!("s{i}")).unwrap();
            write_velodyne_bin(&cloud, &scans.join(format!("{i:06}.bin"))).unwrap();
            clouds.push(cloud);
        }
        let poses_path = dir.path().join("poses.txt");
        let p1 = Pose::identity();
        let p2 = Pose::from_translation(Vector3::new(0.5, 0.0, 0.0));
        fs::write(&poses_path, format!("{}\n{}\n", p1.to_kitti_line(), p2.to_kitti_line())).unwrap();

        let seq = load_kitti_sequence(&scans, &poses_path).unwrap();
        assert_eq!(seq.len(), 2);
        assert!(seq[0].1.is_close(&p1, 1e-12));
        assert!(seq[1].1.is_close(&p2, 1e-12));
        // f32 narrowing applies to coordinates.
        for (orig, (loaded, _)) in clouds.iter().zip(&seq) {
            assert_eq!(orig.len(), loaded.len());
            for (a, b) in orig.points().iter().zip(loaded.points()) {
                assert!((a - b).norm() < 1e-5);
            }
        }

        // Count mismatch is an error.
        fs::write(&poses_path, format!("{}\n", p1.to_kitti_line())).unwrap();
        assert!(matches!(
            load_kitti_sequence(&scans, &poses_path),
            Err(DatasetError::CountMismatch { .. })
        ));
    }

    fn tiny_box_scene_cloud(seed: u64) -> PointCloud {
        use crate::seeding::rng_from_seed;
        use rand::Rng;
        let mut rng = rng_from_seed(seed);
        let mut pts = Vec::new();
        for _ in 0..700 {
            let u = rng.random_range(-4.0..4.0);
            let v = rng.random_range(-4.0..4.0);
            match rng.random_range(0..4u32) {
                0 => pts.push(Vector3::new(u, v, 0.0)),
                1 => pts.push(Vector3::new(u, -4.0, (v + 4.0) / 3.0)),
                2 => pts.push(Vector3::new(u, 4.0, (v + 4.0) / 3.0)),
                _ => pts.push(Vector3::new(-4.0, u, (v + 4.0) / 3.0)),
            }
        }
        PointCloud::new(pts, "fixture").unwrap()
    }

    fn tiny_sequence() -> SequenceScans {
        let cloud = tiny_box_scene_cloud(3);
        SequenceScans {
            name: "seq0".into(),
            scans: vec![(cloud.clone(), Pose::identity()), (cloud, Pose::identity())],
        }
    }

    fn tiny_icp_cfg() -> IcpConfig {
        IcpConfig { subsample_size: 256, max_iterations: 20, ..IcpConfig::default() }
    }

    #[test]
    fn identical_scans_give_zero_label() {
        let ds = build_dataset(&[tiny_sequence()], &tiny_icp_cfg(), &InitialGuessConfig::default(), 9, 1)
            .unwrap();
        assert_eq!(ds.samples.len(), 1);
        let s = &ds.samples[0];
        assert!(s.label.as_vector().norm() < 5e-3, "label norm {}", s.label.as_vector().norm());
    }

    #[test]
    fn rebuild_is_bit_identical() {
        let seqs = [tiny_sequence()];
        let cfg = tiny_icp_cfg();
        let g = InitialGuessConfig::default();
        let a = build_dataset(&seqs, &cfg, &g, 11, 1).unwrap();
        let b = build_dataset(&seqs, &cfg, &g, 11, 1).unwrap();
        assert_eq!(a.samples[0].label.as_vector(), b.samples[0].label.as_vector());
        assert_eq!(a.samples[0].estimate, b.samples[0].estimate);
    }

    #[test]
    fn label_recomputes_from_stored_poses() {
        let ds = build_dataset(&[tiny_sequence()], &tiny_icp_cfg(), &InitialGuessConfig::default(), 13, 1)
            .unwrap();
        for s in &ds.samples {
            if !s.converged {
                continue;
            }
            let recomputed = icp_error(&s.estimate, &s.ground_truth).unwrap();
            assert_eq!(recomputed.as_vector(), s.label.as_vector());
            let reconstructed = s.estimate.compose(&exp_map(&s.label));
            assert!(reconstructed.is_close(&s.ground_truth, 1e-9));
        }
    }

    #[test]
    fn save_load_round_trip() {
        let mut ds = build_dataset(&[tiny_sequence()], &tiny_icp_cfg(), &InitialGuessConfig::default(), 17, 2)
            .unwrap();
        assert_eq!(ds.samples.len(), 2, "guesses_per_pair generates extra samples");
        assign_splits(&mut ds, 0.5, 0);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.samples.len(), ds.samples.len());
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.label.as_vector(), b.label.as_vector());
            assert_eq!(a.pair.reading.points(), b.pair.reading.points());
            assert_eq!(a.guess_seed, b.guess_seed);
        }
    }

    #[test]
    fn splits_are_by_sequence() {
        let mut seqs = Vec::new();
        for i in 0..5 {
            let mut s = tiny_sequence();
            s.name = format!("seq{i}");
            seqs.push(s);
        }
        let mut ds = build_dataset(&seqs, &tiny_icp_cfg(), &InitialGuessConfig::default(), 19, 1).unwrap();
        assign_splits(&mut ds, 0.4, 7);
        let val: Vec<_> = ds.manifest.sequences.iter().filter(|s| s.split == Split::Validation).collect();
        assert_eq!(val.len(), 2);
        let train_idx = ds.split_indices(Split::Train);
        let val_idx = ds.split_indices(Split::Validation);
        assert_eq!(train_idx.len() + val_idx.len(), ds.samples.len());
        for i in val_idx {
            let seq = ds.samples[i].sequence;
            assert_eq!(ds.manifest.sequences[seq].split, Split::Validation);
        }
    }
}
