//! Negative-log-likelihood training of the uncertainty network, with
//! minibatching, adaptive per-parameter steps, gradient clipping,
//! sequence-level validation and checkpointing of the best-validation
//! parameters. Fine-tuning runs the same loop from a loaded checkpoint.
//!
//! Everything is deterministic for a fixed seed regardless of worker
//! count: per-sample gradients are computed in parallel but reduced in
//! sample order.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, Split};
use crate::net::{
    forward, forward_with_tape, ldl_diag, ldl_unit_lower, load_tensors, save_tensors,
    GaussianPrediction, NetError, NetworkConfig, NetworkParameters, TensorFile,
};
use crate::se3::{Twist, Vector6};
use crate::seeding::{derive_seed, rng_from_seed};
use rand::seq::SliceRandom;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("train split has no converged samples")]
    EmptyTrainSplit,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Optional stepwise learning-rate decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub every_epochs: usize,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Layer-name prefixes whose parameters stay fixed ("all" freezes
    /// everything).
    pub frozen_segments: Vec<String>,
    pub gradient_clip_norm: f64,
    pub lr_decay: Option<StepDecay>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 30,
            seed: 0,
            frozen_segments: Vec::new(),
            gradient_clip_norm: 10.0,
            lr_decay: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.learning_rate <= 0.0 || self.batch_size == 0 || self.gradient_clip_norm <= 0.0 {
            return Err(TrainError::Config("rates and sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Gaussian negative log likelihood of a label twist under a prediction,
/// with the constant term dropped:
/// `0.5 (xi-mu)^T Sigma^-1 (xi-mu) + 0.5 sum(d_raw)`.
///
/// The inverse is applied through the LDL triangular solves, never formed
/// explicitly, and the returned gradient is analytic in all 27 outputs
/// (mean, strict-lower L entries, raw log-diagonal).
pub fn nll_loss(pred: &GaussianPrediction, label: &Twist) -> (f64, [f64; 27]) {
    let l = ldl_unit_lower(&pred.ldl);
    let d = ldl_diag(&pred.ldl);
    let r = label.as_vector() - pred.mu.as_vector();

    // L y = r (forward substitution; unit diagonal).
    let mut y = Vector6::zeros();
    for i in 0..6 {
        let mut acc = r[i];
        for j in 0..i {
            acc -= l[(i, j)] * y[j];
        }
        y[i] = acc;
    }
    // D w = y.
    let w = Vector6::from_fn(|i, _| y[i] / d[i]);
    // L^T z = w (back substitution).
    let mut z = Vector6::zeros();
    for ii in 0..6 {
        let i = 5 - ii;
        let mut acc = w[i];
        for j in i + 1..6 {
            acc -= l[(j, i)] * z[j];
        }
        z[i] = acc;
    }

    let log_det_half: f64 = pred.ldl[15..21].iter().sum::<f64>() * 0.5;
    let loss = 0.5 * r.dot(&z) + log_det_half;

    let mut grad = [0.0f64; 27];
    for i in 0..6 {
        grad[i] = -z[i]; // d/d mu = -Sigma^-1 r
    }
    let mut idx = 6;
    for i in 1..6 {
        for j in 0..i {
            grad[idx] = -z[i] * y[j]; // d/d L_ij
            idx += 1;
        }
    }
    for k in 0..6 {
        grad[21 + k] = 0.5 * (1.0 - y[k] * w[k]); // d/d d_raw_k
    }
    (loss, grad)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
    pub wallclock_s: f64,
}

/// Parameters plus optimizer state, the unit of persistence.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: NetworkParameters,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub step: u64,
    pub epoch: usize,
    pub best_val_nll: f64,
}

impl Checkpoint {
    pub fn fresh(params: NetworkParameters) -> Self {
        let n = params.data.len();
        Self { params, adam_m: vec![0.0; n], adam_v: vec![0.0; n], step: 0, epoch: 0, best_val_nll: f64::INFINITY }
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let file = TensorFile {
            config_hash: self.params.layout.config_hash.clone(),
            meta: serde_json::json!({
                "kind": "checkpoint",
                "step": self.step,
                "epoch": self.epoch,
                "best_val_nll": self.best_val_nll,
            }),
            tensors: vec![
                ("params".into(), self.params.data.clone()),
                ("adam_m".into(), self.adam_m.clone()),
                ("adam_v".into(), self.adam_v.clone()),
            ],
        };
        Ok(save_tensors(path, &file)?)
    }

    /// Loads a checkpoint, refusing on config-hash mismatch.
    pub fn load(path: &Path, cfg: &NetworkConfig) -> Result<Self, TrainError> {
        let params = NetworkParameters::load(path, cfg)?;
        let file = load_tensors(path)?;
        let tensor = |name: &str| {
            file.tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, d)| d.clone())
                .unwrap_or_else(|| vec![0.0; params.data.len()])
        };
        let meta = &file.meta;
        Ok(Self {
            adam_m: tensor("adam_m"),
            adam_v: tensor("adam_v"),
            step: meta.get("step").and_then(|v| v.as_u64()).unwrap_or(0),
            epoch: meta.get("epoch").and_then(|v| v.as_u64()).unwrap_or(0) as usize,
            best_val_nll: meta.get("best_val_nll").and_then(|v| v.as_f64()).unwrap_or(f64::INFINITY),
            params,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-validation checkpoint.
    pub checkpoint: Checkpoint,
    /// Parameters at the end of the last completed epoch.
    pub final_params: NetworkParameters,
    pub log: Vec<EpochLog>,
    /// True when a non-finite loss aborted training; `checkpoint` then
    /// holds the last good state.
    pub diverged: bool,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

fn frozen_mask(layout: &crate::net::ParamLayout, frozen: &[String]) -> Option<Vec<bool>> {
    if frozen.is_empty() {
        return None;
    }
    let mut mask = vec![false; layout.total];
    for name in frozen {
        if name == "all" {
            mask.fill(true);
            continue;
        }
        for seg in layout.segments_with_prefix(name) {
            mask[seg.offset..seg.offset + seg.len].fill(true);
        }
    }
    Some(mask)
}

/// Mean NLL over the given samples with dropout disabled.
fn mean_nll(
    dataset: &Dataset,
    indices: &[usize],
    params: &NetworkParameters,
    net_cfg: &NetworkConfig,
) -> Result<f64, TrainError> {
    if indices.is_empty() {
        return Ok(f64::NAN);
    }
    let losses: Vec<Result<f64, NetError>> = indices
        .par_iter()
        .map(|&i| {
            let s = &dataset.samples[i];
            let pred = forward(&s.pair, params, net_cfg, None)?;
            Ok(nll_loss(&pred, &s.label).0)
        })
        .collect();
    let mut acc = 0.0;
    for l in losses {
        acc += l?;
    }
    Ok(acc / indices.len() as f64)
}

/// Full training loop. Uses the converged samples of the train split;
/// validation NLL (train NLL when no validation split exists) selects the
/// checkpoint.
pub fn train(
    dataset: &Dataset,
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let params = NetworkParameters::init(net_cfg, derive_seed(cfg.seed, "init", 0))?;
    train_from(Checkpoint::fresh(params), dataset, net_cfg, cfg)
}

/// Fine-tuning: the same loop initialized from a checkpoint (optimizer
/// moments restart). The checkpoint's config hash must match.
pub fn finetune(
    checkpoint: Checkpoint,
    dataset: &Dataset,
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if checkpoint.params.layout.config_hash != net_cfg.config_hash() {
        return Err(TrainError::Net(NetError::HashMismatch {
            params_hash: checkpoint.params.layout.config_hash.clone(),
            config_hash: net_cfg.config_hash(),
        }));
    }
    train_from(Checkpoint::fresh(checkpoint.params), dataset, net_cfg, cfg)
}

fn train_from(
    start: Checkpoint,
    dataset: &Dataset,
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    net_cfg.validate().map_err(TrainError::Net)?;
    let train_idx = dataset.converged_indices(Split::Train);
    if train_idx.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    let val_idx = dataset.converged_indices(Split::Validation);

    let mut params = start.params;
    let mut adam = Adam::new(params.data.len());
    let frozen = frozen_mask(&params.layout, &cfg.frozen_segments);
    let mut log = Vec::with_capacity(cfg.epochs);
    let started = Instant::now();

    let initial_train = mean_nll(dataset, &train_idx, &params, net_cfg)?;
    let initial_val =
        if val_idx.is_empty() { initial_train } else { mean_nll(dataset, &val_idx, &params, net_cfg)? };
    let mut best = Checkpoint {
        params: params.clone(),
        adam_m: adam.m.clone(),
        adam_v: adam.v.clone(),
        step: 0,
        epoch: 0,
        best_val_nll: initial_val,
    };
    let mut diverged = false;

    'epochs: for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        let mut rng = rng_from_seed(derive_seed(cfg.seed, "shuffle", epoch as u64));
        order.shuffle(&mut rng);

        let mut lr = cfg.learning_rate;
        if let Some(decay) = &cfg.lr_decay {
            let drops = epoch / decay.every_epochs.max(1);
            lr *= decay.factor.powi(drops as i32);
        }

        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<Result<(f64, Vec<f64>), NetError>> = batch
                .par_iter()
                .enumerate()
                .map(|(pos, &i)| {
                    let s = &dataset.samples[i];
                    let mask_seed = derive_seed(
                        cfg.seed,
                        "dropout",
                        ((epoch as u64) << 40) | ((batch_no as u64) << 16) | pos as u64,
                    );
                    let (pred, tape) = forward_with_tape(&s.pair, &params, net_cfg, Some(mask_seed))?;
                    let (loss, out_grad) = nll_loss(&pred, &s.label);
                    Ok((loss, tape.backward(&out_grad)))
                })
                .collect();

            let mut grad = vec![0.0; params.data.len()];
            let mut batch_loss = 0.0;
            for r in results {
                let (loss, g) = r?;
                batch_loss += loss;
                for (acc, v) in grad.iter_mut().zip(&g) {
                    *acc += v;
                }
            }
            batch_loss /= batch.len() as f64;
            if !batch_loss.is_finite() {
                diverged = true;
                break 'epochs;
            }
            let inv = 1.0 / batch.len() as f64;
            for g in grad.iter_mut() {
                *g *= inv;
            }
            if let Some(mask) = &frozen {
                for (g, &f) in grad.iter_mut().zip(mask) {
                    if f {
                        *g = 0.0;
                    }
                }
            }
            let norm: f64 = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > cfg.gradient_clip_norm {
                let scale = cfg.gradient_clip_norm / norm;
                for g in grad.iter_mut() {
                    *g *= scale;
                }
            }
            adam.update(&mut params.data, &grad, lr);
        }

        if params.check_finite().is_err() {
            diverged = true;
            break 'epochs;
        }
        let train_nll = mean_nll(dataset, &train_idx, &params, net_cfg)?;
        let val_nll =
            if val_idx.is_empty() { train_nll } else { mean_nll(dataset, &val_idx, &params, net_cfg)? };
        if !train_nll.is_finite() || !val_nll.is_finite() {
            diverged = true;
            break 'epochs;
        }
        log.push(EpochLog {
            epoch,
            train_nll,
            val_nll,
            wallclock_s: started.elapsed().as_secs_f64(),
        });
        if val_nll < best.best_val_nll {
            best = Checkpoint {
                params: params.clone(),
                adam_m: adam.m.clone(),
                adam_v: adam.v.clone(),
                step: adam.step,
                epoch: epoch + 1,
                best_val_nll: val_nll,
            };
        }
    }

    Ok(TrainOutcome { checkpoint: best, final_params: params, log, diverged })
}

/// Writes the per-epoch log as CSV: epoch, train_nll, val_nll, wallclock.
pub fn write_training_log(log: &[EpochLog], path: &Path) -> Result<(), TrainError> {
    let mut out = String::from("epoch,train_nll,val_nll,wallclock_s\n");
    for e in log {
        out.push_str(&format!(
            "{},{:.9e},{:.9e},{:.3}\n",
            e.epoch, e.train_nll, e.val_nll, e.wallclock_s
        ));
    }
    std::fs::write(path, out)
        .map_err(|e| TrainError::Io { path: path.display().to_string(), source: e })
}
