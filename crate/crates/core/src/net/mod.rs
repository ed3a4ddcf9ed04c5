//! Point-feature network mapping a decimated cloud pair to a Gaussian
//! over the registration-error twist: a predicted mean plus the LDL
//! parameters of a positive-definite 6x6 covariance.
//!
//! The architecture follows a scene-flow-style encoder/decoder: shared
//! set-conv layers on both clouds, one flow-embedding layer correlating
//! them, further set convs, set upconvs with skip links back to full
//! resolution, a per-point regression to R^3, a global max pool and a
//! final MLP emitting the 27 Gaussian parameters. Each MLP sublayer is
//! linear + learnable per-feature affine + ReLU + dropout; gradients come
//! from a tape recorded during the forward pass, so a backward pass can
//! never be paired with the wrong dropout masks.

mod graph;
mod params;

pub use graph::{forward, forward_with_tape, Tape};
pub use params::{load_tensors, save_tensors, NetworkParameters, ParamLayout, SegmentInfo, TensorFile};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::se3::{CovarianceSE3, Matrix6, Twist, Vector6};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("pair size mismatch: config expects {expected} points, got reading {reading} / reference {reference}")]
    PairSize { expected: usize, reading: usize, reference: usize },
    #[error("parameter/config hash mismatch: params {params_hash}, config {config_hash}")]
    HashMismatch { params_hash: String, config_hash: String },
    #[error("parameter count {have} does not match layout {want}")]
    ParamCount { have: usize, want: usize },
    #[error("parameter file {path}: {reason}")]
    ParamFile { path: String, reason: String },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
}

/// One set-conv layer: farthest-point sampling to `sample_rate * n`
/// centers, radius grouping, shared per-neighbor MLP, max pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetConvSpec {
    pub radius: f64,
    pub sample_rate: f64,
    pub mlp: Vec<usize>,
}

/// Cross-cloud correlation layer: k nearest neighbors in the other cloud,
/// per-pair MLP on (feature1, feature2, displacement), max pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowEmbeddingSpec {
    pub k: usize,
    pub mlp: Vec<usize>,
}

/// Upsampling layer: fine points group coarse neighbors within a radius,
/// MLP + max pool, concatenate the fine level's skip features, post-MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetUpconvSpec {
    pub radius: f64,
    pub mlp: Vec<usize>,
    pub post_mlp: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Set convs applied to both clouds with shared weights.
    pub set_conv_pre: Vec<SetConvSpec>,
    pub flow_embedding: FlowEmbeddingSpec,
    /// Set convs applied to the reading branch after the embedding.
    pub set_conv_post: Vec<SetConvSpec>,
    /// One upconv per downsampling transition, deepest first.
    pub set_upconv: Vec<SetUpconvSpec>,
    /// Hidden widths of the per-point regression; a plain linear to R^3
    /// follows.
    pub regression_mlp: Vec<usize>,
    /// Hidden widths of the head after the global pool; a plain linear to
    /// the 27 Gaussian parameters follows.
    pub head_mlp: Vec<usize>,
    pub dropout_rate: f64,
    /// Global multiplier applied to all MLP widths.
    pub scale_factor: f64,
    /// Cap on neighbors per radius group.
    pub max_group_size: usize,
    /// Expected number of points in each cloud of the input pair.
    pub pair_size: usize,
}

impl NetworkConfig {
    /// Full-scale architecture: two shared set convs, knn flow embedding,
    /// two deeper set convs, three upconvs, on 2048-point pairs.
    pub fn full_scale() -> Self {
        Self {
            set_conv_pre: vec![
                SetConvSpec { radius: 2.0, sample_rate: 1.0, mlp: vec![32, 32, 64] },
                SetConvSpec { radius: 4.0, sample_rate: 0.25, mlp: vec![64, 64, 128] },
            ],
            flow_embedding: FlowEmbeddingSpec { k: 16, mlp: vec![128, 128, 128] },
            set_conv_post: vec![
                SetConvSpec { radius: 8.0, sample_rate: 0.25, mlp: vec![128, 128, 256] },
                SetConvSpec { radius: 16.0, sample_rate: 0.125, mlp: vec![256, 256, 512] },
            ],
            set_upconv: vec![
                SetUpconvSpec { radius: 16.0, mlp: vec![128, 128, 256], post_mlp: vec![256] },
                SetUpconvSpec { radius: 8.0, mlp: vec![128, 128, 256], post_mlp: vec![256] },
                SetUpconvSpec { radius: 4.0, mlp: vec![128, 128, 256], post_mlp: vec![256] },
            ],
            regression_mlp: vec![128],
            head_mlp: vec![128, 64],
            dropout_rate: 0.2,
            scale_factor: 1.0,
            max_group_size: 32,
            pair_size: 2048,
        }
    }

    /// Desk-scale default: the same layer structure at a quarter of the
    /// widths on 256-point pairs.
    pub fn desk_scale() -> Self {
        Self { scale_factor: 0.25, pair_size: 256, ..Self::full_scale() }
    }

    pub fn scaled_width(&self, w: usize) -> usize {
        ((w as f64 * self.scale_factor).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.set_conv_pre.is_empty() || self.set_conv_post.is_empty() {
            return Err(NetError::Config(
                "need at least one set conv before and after the flow embedding".into(),
            ));
        }
        for s in self.set_conv_pre.iter().chain(&self.set_conv_post) {
            if !(s.sample_rate > 0.0 && s.sample_rate <= 1.0) {
                return Err(NetError::Config(format!("sample rate {} not in (0, 1]", s.sample_rate)));
            }
            if s.radius <= 0.0 || s.mlp.is_empty() {
                return Err(NetError::Config("set conv needs positive radius and widths".into()));
            }
        }
        if self.flow_embedding.k == 0 || self.flow_embedding.mlp.is_empty() {
            return Err(NetError::Config("flow embedding needs k >= 1 and widths".into()));
        }
        for s in &self.set_upconv {
            if s.radius <= 0.0 || s.mlp.is_empty() || s.post_mlp.is_empty() {
                return Err(NetError::Config("set upconv needs positive radius and widths".into()));
            }
        }
        let transitions = self
            .set_conv_pre
            .iter()
            .chain(&self.set_conv_post)
            .filter(|s| s.sample_rate < 1.0)
            .count();
        if self.set_upconv.len() != transitions {
            return Err(NetError::Config(format!(
                "{} upconv layers cannot invert {} downsampling transitions",
                self.set_upconv.len(),
                transitions
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(NetError::Config(format!("dropout rate {} not in [0, 1)", self.dropout_rate)));
        }
        if self.scale_factor <= 0.0 || self.max_group_size == 0 || self.pair_size == 0 {
            return Err(NetError::Config("scale, group cap and pair size must be positive".into()));
        }
        Ok(())
    }

    /// Hash of the canonical JSON form; parameter files must match it.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }
}

/// Network output: predicted mean twist plus the 21 LDL covariance
/// parameters (15 strictly-lower entries of unit L, then 6 raw log
/// diagonal values).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrediction {
    pub mu: Twist,
    pub ldl: [f64; 21],
}

impl GaussianPrediction {
    pub fn from_outputs(out: &[f64; 27]) -> Self {
        let mu = Twist::from_vector(&Vector6::from_row_slice(&out[0..6]));
        let mut ldl = [0.0; 21];
        ldl.copy_from_slice(&out[6..27]);
        Self { mu, ldl }
    }

    pub fn covariance(&self) -> CovarianceSE3 {
        ldl_to_covariance(&self.ldl)
    }
}

/// Unit lower-triangular factor from the first 15 parameters, strict
/// lower entries in row-major order.
pub fn ldl_unit_lower(ldl: &[f64; 21]) -> Matrix6 {
    let mut l = Matrix6::identity();
    let mut idx = 0;
    for i in 1..6 {
        for j in 0..i {
            l[(i, j)] = ldl[idx];
            idx += 1;
        }
    }
    l
}

/// Positive diagonal from the last 6 parameters: `D = exp(d_raw)`.
pub fn ldl_diag(ldl: &[f64; 21]) -> Vector6 {
    Vector6::from_fn(|i, _| ldl[15 + i].exp())
}

/// `Sigma = L diag(exp(d_raw)) L^T`: symmetric positive definite for any
/// finite parameters (up to f64 overflow of the exponential).
///
/// The exact product is always PD, but assembling it in f64 can round a
/// matrix with condition number beyond 1/eps indefinite. When the plain
/// Cholesky of the assembled matrix fails, the smallest diagonal
/// inflation restoring definiteness is applied, starting at eps * trace
/// and doubling; well-conditioned parameters are never touched.
pub fn ldl_to_covariance(ldl: &[f64; 21]) -> CovarianceSE3 {
    let l = ldl_unit_lower(ldl);
    let d = ldl_diag(ldl);
    let mut ld = l;
    for j in 0..6 {
        for i in 0..6 {
            ld[(i, j)] *= d[j];
        }
    }
    let m = ld * l.transpose();
    let mut sym = (m + m.transpose()) * 0.5;
    if nalgebra::Cholesky::new(sym).is_some() {
        return CovarianceSE3::new_psd(sym).expect("factorized matrix is PSD");
    }
    let mut ridge = f64::EPSILON * sym.trace().abs().max(f64::MIN_POSITIVE);
    loop {
        let candidate = sym + Matrix6::identity() * ridge;
        if nalgebra::Cholesky::new(candidate).is_some() {
            sym = candidate;
            break;
        }
        ridge *= 2.0;
        assert!(ridge.is_finite(), "ridge escalation diverged");
    }
    CovarianceSE3::new_psd(sym).expect("ridged matrix is PSD")
}
