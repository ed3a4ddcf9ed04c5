//! Monte-Carlo-dropout inference: samples the network with dropout active
//! at test time and fuses the per-sample Gaussians into aleatoric,
//! epistemic and total covariances.
//!
//! The epistemic part is the population scatter of the sampled means
//! (divide by N), the aleatoric part is the mean of the sampled
//! covariances, and the total is their sum, exactly.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{forward, GaussianPrediction, NetError, NetworkConfig, NetworkParameters};
use crate::pointcloud::FilteredPair;
use crate::se3::{CovarianceSE3, GeometryError, Matrix6, Twist, Vector6};

#[derive(Debug, Error)]
pub enum BayesError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("Monte-Carlo config needs at least one sample")]
    NoSamples,
    #[error("report io on {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub num_samples: usize,
    pub base_seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self { num_samples: 32, base_seed: 0 }
    }
}

/// Fused uncertainty estimate for one cloud pair.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyReport {
    /// Mean of the sampled error means; exported for dispersion analysis,
    /// never used to correct the registration estimate.
    pub mean_twist: Twist,
    pub aleatoric: CovarianceSE3,
    pub epistemic: CovarianceSE3,
    pub total: CovarianceSE3,
    pub num_samples: usize,
    pub base_seed: u64,
}

/// Fuses sampled (mean, covariance) pairs. Exposed separately so the
/// fusion arithmetic can be exercised against stub predictors.
pub fn mc_report_from_samples(
    means: &[Vector6],
    covs: &[Matrix6],
    base_seed: u64,
) -> Result<UncertaintyReport, BayesError> {
    if means.is_empty() || means.len() != covs.len() {
        return Err(BayesError::NoSamples);
    }
    let n = means.len() as f64;
    let mut mean = Vector6::zeros();
    for m in means {
        mean += m;
    }
    mean /= n;
    let mut epistemic = Matrix6::zeros();
    for m in means {
        let d = m - mean;
        epistemic += d * d.transpose();
    }
    epistemic /= n;
    let mut aleatoric = Matrix6::zeros();
    for c in covs {
        aleatoric += c;
    }
    aleatoric /= n;
    let total = aleatoric + epistemic;
    Ok(UncertaintyReport {
        mean_twist: Twist::from_vector(&mean),
        aleatoric: CovarianceSE3::new_psd(aleatoric)?,
        epistemic: CovarianceSE3::new_psd(epistemic)?,
        total: CovarianceSE3::new_psd(total)?,
        num_samples: means.len(),
        base_seed,
    })
}

/// Runs `num_samples` forward passes with dropout active (mask seeds
/// `base_seed .. base_seed + N - 1`) and fuses them.
pub fn mc_predict(
    pair: &FilteredPair,
    params: &NetworkParameters,
    net_cfg: &NetworkConfig,
    mc: &McConfig,
) -> Result<UncertaintyReport, BayesError> {
    if mc.num_samples == 0 {
        return Err(BayesError::NoSamples);
    }
    let preds: Vec<Result<GaussianPrediction, NetError>> = (0..mc.num_samples as u64)
        .into_par_iter()
        .map(|i| forward(pair, params, net_cfg, Some(mc.base_seed.wrapping_add(i))))
        .collect();
    let mut means = Vec::with_capacity(mc.num_samples);
    let mut covs = Vec::with_capacity(mc.num_samples);
    for p in preds {
        let p = p?;
        means.push(p.mu.as_vector());
        covs.push(*p.covariance().matrix());
    }
    mc_report_from_samples(&means, &covs, mc.base_seed)
}

/// Single forward pass with dropout disabled; the deterministic baseline.
pub fn predict_deterministic(
    pair: &FilteredPair,
    params: &NetworkParameters,
    net_cfg: &NetworkConfig,
) -> Result<GaussianPrediction, BayesError> {
    Ok(forward(pair, params, net_cfg, None)?)
}

#[derive(Serialize, Deserialize)]
struct ReportDto {
    schema_version: u32,
    num_samples: usize,
    base_seed: u64,
    mean_twist: [f64; 6],
    aleatoric: Vec<f64>,
    epistemic: Vec<f64>,
    total: Vec<f64>,
}

fn matrix_row_major(m: &Matrix6) -> Vec<f64> {
    let mut out = Vec::with_capacity(36);
    for r in 0..6 {
        for c in 0..6 {
            out.push(m[(r, c)]);
        }
    }
    out
}

fn matrix_from_row_major(v: &[f64]) -> Matrix6 {
    Matrix6::from_fn(|r, c| v[r * 6 + c])
}

impl UncertaintyReport {
    pub fn to_json(&self) -> String {
        let v = self.mean_twist.as_vector();
        let dto = ReportDto {
            schema_version: 1,
            num_samples: self.num_samples,
            base_seed: self.base_seed,
            mean_twist: [v[0], v[1], v[2], v[3], v[4], v[5]],
            aleatoric: matrix_row_major(self.aleatoric.matrix()),
            epistemic: matrix_row_major(self.epistemic.matrix()),
            total: matrix_row_major(self.total.matrix()),
        };
        serde_json::to_string_pretty(&dto).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, BayesError> {
        let dto: ReportDto = serde_json::from_str(text)
            .map_err(|e| BayesError::Io { path: "<json>".into(), reason: e.to_string() })?;
        Ok(Self {
            mean_twist: Twist::from_vector(&Vector6::from_row_slice(&dto.mean_twist)),
            aleatoric: CovarianceSE3::new_psd(matrix_from_row_major(&dto.aleatoric))?,
            epistemic: CovarianceSE3::new_psd(matrix_from_row_major(&dto.epistemic))?,
            total: CovarianceSE3::new_psd(matrix_from_row_major(&dto.total))?,
            num_samples: dto.num_samples,
            base_seed: dto.base_seed,
        })
    }

    pub fn save_json(&self, path: &Path) -> Result<(), BayesError> {
        std::fs::write(path, self.to_json())
            .map_err(|e| BayesError::Io { path: path.display().to_string(), reason: e.to_string() })
    }
}
