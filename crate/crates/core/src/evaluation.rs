//! Calibration metrics and validation harness: normalized norm error,
//! normalized Mahalanobis distance, trajectory covariance propagation and
//! the CSV/SVG report files.
//!
//! Both metrics have optimum one; values below one are pessimistic and
//! above one optimistic. A perfectly calibrated 6-dimensional Gaussian
//! actually converges to `E[sqrt(chi2_6 / 6)] ~= 0.9594`, which the
//! report footnotes alongside the nominal target.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bayes::{mc_predict, BayesError, McConfig};
use crate::dataset::{Dataset, Split};
use crate::net::{NetError, NetworkConfig, NetworkParameters};
use crate::se3::{
    compose_with_covariance, CompoundOrder, CovarianceSE3, GeometryError, Matrix6, Pose, Twist,
    Vector6,
};
use crate::svg::{Frame, SvgCanvas};

/// Mean of sqrt(chi2_6 / 6): the exact large-sample value of the
/// normalized Mahalanobis distance under perfect calibration.
/// `sqrt(2) * Gamma(3.5) / (Gamma(3) * sqrt(6))`.
pub const CHI6_NORMALIZED_MEAN: f64 = 0.9593870658526668;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no records to evaluate")]
    NoRecords,
    #[error("covariance {block:?} block is not positive definite at record {index}")]
    NotPositiveDefinite { block: Block, index: usize },
    #[error("covariance trace is zero at record {0}")]
    ZeroTrace(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Bayes(#[from] BayesError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> EvalError {
    EvalError::Io { path: path.display().to_string(), source }
}

/// Which 3x3 sub-block (and sub-vector) a metric is computed on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Translation,
    Rotation,
    Full,
}

impl Block {
    fn label(&self) -> &'static str {
        match self {
            Block::Translation => "translation",
            Block::Rotation => "rotation",
            Block::Full => "full",
        }
    }
}

/// Which covariance enters the metric.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintySource {
    Total,
    AleatoricOnly,
}

impl UncertaintySource {
    fn label(&self) -> &'static str {
        match self {
            UncertaintySource::Total => "total",
            UncertaintySource::AleatoricOnly => "aleatoric",
        }
    }
}

/// Per-sample evaluation input: the observed label twist plus the
/// predicted covariances and the pose pair for trajectory composition.
#[derive(Clone, Debug)]
pub struct EvaluationRecord {
    pub label: Twist,
    pub total: Matrix6,
    pub aleatoric: Matrix6,
    pub epistemic_trace: f64,
    pub converged: bool,
    pub estimate: Pose,
    pub truth: Pose,
}

impl EvaluationRecord {
    fn covariance(&self, source: UncertaintySource) -> &Matrix6 {
        match source {
            UncertaintySource::Total => &self.total,
            UncertaintySource::AleatoricOnly => &self.aleatoric,
        }
    }
}

fn block_parts(xi: &Vector6, cov: &Matrix6, block: Block) -> (nalgebra::DVector<f64>, nalgebra::DMatrix<f64>) {
    match block {
        Block::Translation => (
            nalgebra::DVector::from_row_slice(&[xi[0], xi[1], xi[2]]),
            nalgebra::DMatrix::from_fn(3, 3, |r, c| cov[(r, c)]),
        ),
        Block::Rotation => (
            nalgebra::DVector::from_row_slice(&[xi[3], xi[4], xi[5]]),
            nalgebra::DMatrix::from_fn(3, 3, |r, c| cov[(r + 3, c + 3)]),
        ),
        Block::Full => (
            nalgebra::DVector::from_row_slice(xi.as_slice()),
            nalgebra::DMatrix::from_fn(6, 6, |r, c| cov[(r, c)]),
        ),
    }
}

fn converged_records(records: &[EvaluationRecord]) -> Vec<&EvaluationRecord> {
    records.iter().filter(|r| r.converged).collect()
}

/// Normalized Norm Error: mean over records of
/// `sqrt(|xi|^2 / tr(Sigma))` on the selected block. Optimum one.
pub fn nne_with(
    records: &[EvaluationRecord],
    block: Block,
    source: UncertaintySource,
) -> Result<f64, EvalError> {
    let used = converged_records(records);
    if used.is_empty() {
        return Err(EvalError::NoRecords);
    }
    let mut acc = 0.0;
    for (i, r) in used.iter().enumerate() {
        let (xi, cov) = block_parts(&r.label.as_vector(), r.covariance(source), block);
        let trace = cov.diagonal().sum();
        if trace <= 0.0 {
            return Err(EvalError::ZeroTrace(i));
        }
        acc += (xi.norm_squared() / trace).sqrt();
    }
    Ok(acc / used.len() as f64)
}

pub fn nne(records: &[EvaluationRecord], block: Block) -> Result<f64, EvalError> {
    nne_with(records, block, UncertaintySource::Total)
}

/// Normalized Mahalanobis distance: mean over records of
/// `sqrt(xi^T Sigma^-1 xi / dim)`. The inverse is applied through a
/// Cholesky solve. Optimum one.
pub fn mahalanobis_with(
    records: &[EvaluationRecord],
    block: Block,
    source: UncertaintySource,
) -> Result<f64, EvalError> {
    let used = converged_records(records);
    if used.is_empty() {
        return Err(EvalError::NoRecords);
    }
    let mut acc = 0.0;
    for (i, r) in used.iter().enumerate() {
        let (xi, cov) = block_parts(&r.label.as_vector(), r.covariance(source), block);
        acc += normalized_mahalanobis(&xi, &cov)
            .ok_or(EvalError::NotPositiveDefinite { block, index: i })?;
    }
    Ok(acc / used.len() as f64)
}

pub fn mahalanobis(records: &[EvaluationRecord], block: Block) -> Result<f64, EvalError> {
    mahalanobis_with(records, block, UncertaintySource::Total)
}

fn normalized_mahalanobis(xi: &nalgebra::DVector<f64>, cov: &nalgebra::DMatrix<f64>) -> Option<f64> {
    let chol = nalgebra::Cholesky::new(cov.clone())?;
    let solved = chol.solve(xi);
    let d2 = xi.dot(&solved);
    Some((d2.max(0.0) / xi.len() as f64).sqrt())
}

/// One step of the composed trajectory with its compound covariance.
#[derive(Clone, Debug)]
pub struct TrajectoryStep {
    pub pose: Pose,
    pub covariance: Matrix6,
}

#[derive(Clone, Debug)]
pub struct TrajectoryEval {
    pub final_error: Twist,
    pub dm_translation: f64,
    pub dm_rotation: f64,
    pub dm_full: f64,
    pub per_step: Vec<TrajectoryStep>,
    pub truth_final: Pose,
    pub estimate_final: Pose,
}

/// Composes the per-pair estimates into the final pose, propagating the
/// per-pair covariances with the selected compound order, and scores the
/// final-pose error against the compound covariance (Mahalanobis with a
/// single sample). All steps participate: a trajectory cannot skip a
/// non-converged link.
pub fn trajectory_eval(
    records: &[EvaluationRecord],
    source: UncertaintySource,
    order: CompoundOrder,
) -> Result<TrajectoryEval, EvalError> {
    if records.is_empty() {
        return Err(EvalError::NoRecords);
    }
    let mut chain: Vec<(Pose, CovarianceSE3)> = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let cov = CovarianceSE3::new_pd(*r.covariance(source))
            .map_err(|_| EvalError::NotPositiveDefinite { block: Block::Full, index: i })?;
        chain.push((r.estimate, cov));
    }
    let mut per_step = Vec::with_capacity(records.len());
    for k in 1..=records.len() {
        let (pose, cov) = compose_with_covariance(&chain[0..k], order)?;
        per_step.push(TrajectoryStep { pose, covariance: *cov.matrix() });
    }
    let estimate_final = per_step.last().unwrap().pose;
    let compound = per_step.last().unwrap().covariance;
    let truth_final = records.iter().skip(1).fold(records[0].truth, |acc, r| acc.compose(&r.truth));
    let final_error = crate::se3::icp_error(&estimate_final, &truth_final)?;
    let xi = final_error.as_vector();
    let score = |block: Block| -> Result<f64, EvalError> {
        let (v, cov) = block_parts(&xi, &compound, block);
        normalized_mahalanobis(&v, &cov)
            .ok_or(EvalError::NotPositiveDefinite { block, index: records.len() - 1 })
    };
    Ok(TrajectoryEval {
        final_error,
        dm_translation: score(Block::Translation)?,
        dm_rotation: score(Block::Rotation)?,
        dm_full: score(Block::Full)?,
        per_step,
        truth_final,
        estimate_final,
    })
}

// ---------------------------------------------------------------------
// Dataset evaluation and report files.
// ---------------------------------------------------------------------

/// Runs MC-dropout prediction over a dataset split and assembles the
/// evaluation records (parallel across samples, order stable).
pub fn evaluate_dataset(
    dataset: &Dataset,
    split: Split,
    params: &NetworkParameters,
    net_cfg: &NetworkConfig,
    mc: &McConfig,
) -> Result<Vec<EvaluationRecord>, EvalError> {
    let indices = dataset.split_indices(split);
    if indices.is_empty() {
        return Err(EvalError::NoRecords);
    }
    let results: Vec<Result<EvaluationRecord, EvalError>> = indices
        .par_iter()
        .map(|&i| {
            let s = &dataset.samples[i];
            let mc_i = McConfig {
                num_samples: mc.num_samples,
                base_seed: mc.base_seed.wrapping_add((i as u64) << 10),
            };
            let report = mc_predict(&s.pair, params, net_cfg, &mc_i)?;
            Ok(EvaluationRecord {
                label: s.label,
                total: *report.total.matrix(),
                aleatoric: *report.aleatoric.matrix(),
                epistemic_trace: report.epistemic.matrix().trace(),
                converged: s.converged,
                estimate: s.estimate,
                truth: s.ground_truth,
            })
        })
        .collect();
    results.into_iter().collect()
}

#[derive(Serialize, Deserialize)]
struct RecordDto {
    label: [f64; 6],
    total: Vec<f64>,
    aleatoric: Vec<f64>,
    epistemic_trace: f64,
    converged: bool,
    estimate: [f64; 12],
    truth: [f64; 12],
}

fn pose_to12(p: &Pose) -> [f64; 12] {
    let mut out = [0.0; 12];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 4 + c] = p.rotation()[(r, c)];
        }
        out[r * 4 + 3] = p.translation()[r];
    }
    out
}

fn pose_from12(v: &[f64; 12]) -> Result<Pose, GeometryError> {
    Pose::from_matrix_reproject(
        Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]),
        Vector3::new(v[3], v[7], v[11]),
    )
}

fn mat_to_vec(m: &Matrix6) -> Vec<f64> {
    (0..6).flat_map(|r| (0..6).map(move |c| (r, c))).map(|(r, c)| m[(r, c)]).collect()
}

fn mat_from_vec(v: &[f64]) -> Matrix6 {
    Matrix6::from_fn(|r, c| v[r * 6 + c])
}

/// Serializes records to JSON (consumed by the plot stage).
pub fn save_records(records: &[EvaluationRecord], path: &Path) -> Result<(), EvalError> {
    let dtos: Vec<RecordDto> = records
        .iter()
        .map(|r| RecordDto {
            label: {
                let v = r.label.as_vector();
                [v[0], v[1], v[2], v[3], v[4], v[5]]
            },
            total: mat_to_vec(&r.total),
            aleatoric: mat_to_vec(&r.aleatoric),
            epistemic_trace: r.epistemic_trace,
            converged: r.converged,
            estimate: pose_to12(&r.estimate),
            truth: pose_to12(&r.truth),
        })
        .collect();
    let json = serde_json::to_string_pretty(&dtos).expect("records serialize");
    std::fs::write(path, json).map_err(|e| io_err(path, e))
}

pub fn load_records(path: &Path) -> Result<Vec<EvaluationRecord>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let dtos: Vec<RecordDto> = serde_json::from_str(&text)
        .map_err(|e| io_err(path, std::io::Error::new(std::io::ErrorKind::InvalidData, e)))?;
    dtos.into_iter()
        .map(|d| {
            Ok(EvaluationRecord {
                label: Twist::from_vector(&Vector6::from_row_slice(&d.label)),
                total: mat_from_vec(&d.total),
                aleatoric: mat_from_vec(&d.aleatoric),
                epistemic_trace: d.epistemic_trace,
                converged: d.converged,
                estimate: pose_from12(&d.estimate)?,
                truth: pose_from12(&d.truth)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct ReportFiles {
    pub metrics_csv: PathBuf,
    pub records_json: PathBuf,
    pub bands_svg: PathBuf,
    pub trajectory_csv: PathBuf,
    pub trajectory_svg: PathBuf,
    pub epistemic_svg: PathBuf,
}

/// Writes the full calibration report: the single-pair metric table
/// (aleatoric-only and total columns), trajectory propagation results and
/// the three plots. Float formatting is fixed, so outputs are byte-stable
/// for identical inputs.
pub fn calibration_report(
    records: &[EvaluationRecord],
    out_dir: &Path,
    compare_epistemic: Option<&[f64]>,
) -> Result<ReportFiles, EvalError> {
    if records.is_empty() {
        return Err(EvalError::NoRecords);
    }
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let files = ReportFiles {
        metrics_csv: out_dir.join("metrics.csv"),
        records_json: out_dir.join("records.json"),
        bands_svg: out_dir.join("bands.svg"),
        trajectory_csv: out_dir.join("trajectory.csv"),
        trajectory_svg: out_dir.join("trajectory.svg"),
        epistemic_svg: out_dir.join("epistemic.svg"),
    };

    let excluded = records.iter().filter(|r| !r.converged).count();
    let mut csv = String::new();
    csv.push_str(&format!(
        "# records={} excluded_non_converged={} chi6_normalized_mean={CHI6_NORMALIZED_MEAN:.6}\n",
        records.len(),
        excluded
    ));
    csv.push_str("metric,block,source,value\n");
    for block in [Block::Translation, Block::Rotation, Block::Full] {
        for source in [UncertaintySource::AleatoricOnly, UncertaintySource::Total] {
            let nne_v = nne_with(records, block, source)?;
            let dm_v = mahalanobis_with(records, block, source)?;
            csv.push_str(&format!("nne,{},{},{:.9e}\n", block.label(), source.label(), nne_v));
            csv.push_str(&format!("dm,{},{},{:.9e}\n", block.label(), source.label(), dm_v));
        }
    }

    for (order, tag) in [(CompoundOrder::Fourth, "fourth"), (CompoundOrder::Second, "second")] {
        match trajectory_eval(records, UncertaintySource::Total, order) {
            Ok(traj) => {
                csv.push_str(&format!("trajectory_dm_{tag},translation,total,{:.9e}\n", traj.dm_translation));
                csv.push_str(&format!("trajectory_dm_{tag},rotation,total,{:.9e}\n", traj.dm_rotation));
                csv.push_str(&format!("trajectory_dm_{tag},full,total,{:.9e}\n", traj.dm_full));
            }
            Err(e) => {
                csv.push_str(&format!("# trajectory_{tag} unavailable: {e}\n"));
            }
        }
    }
    std::fs::write(&files.metrics_csv, csv).map_err(|e| io_err(&files.metrics_csv, e))?;

    save_records(records, &files.records_json)?;
    write_bands_svg(records, &files.bands_svg)?;
    write_trajectory_outputs(records, &files.trajectory_csv, &files.trajectory_svg)?;
    write_epistemic_svg(records, compare_epistemic, &files.epistemic_svg)?;
    Ok(files)
}

/// Per-dimension observed error against the +/- 3 sigma band of the
/// predicted total covariance.
fn write_bands_svg(records: &[EvaluationRecord], path: &Path) -> Result<(), EvalError> {
    let dims = ["rho_x", "rho_y", "rho_z", "phi_x", "phi_y", "phi_z"];
    let n = records.len();
    let panel_h = 90.0;
    let mut canvas = SvgCanvas::new(640.0, panel_h * 6.0 + 30.0);
    for (d, name) in dims.iter().enumerate() {
        let sigmas: Vec<f64> = records.iter().map(|r| 3.0 * r.total[(d, d)].sqrt()).collect();
        let labels: Vec<f64> = records.iter().map(|r| r.label.as_vector()[d]).collect();
        let y_ext = sigmas
            .iter()
            .chain(labels.iter())
            .fold(1e-12f64, |acc, v| acc.max(v.abs()));
        let frame = Frame {
            x_min: 0.0,
            x_max: (n.max(2) - 1) as f64,
            y_min: -y_ext,
            y_max: y_ext,
            left: 50.0,
            top: 10.0 + d as f64 * panel_h,
            width: 570.0,
            height: panel_h - 20.0,
        };
        let mut band: Vec<(f64, f64)> = Vec::with_capacity(2 * n);
        for (i, s) in sigmas.iter().enumerate() {
            band.push(frame.map(i as f64, *s));
        }
        for (i, s) in sigmas.iter().enumerate().rev() {
            band.push(frame.map(i as f64, -*s));
        }
        canvas.polygon(&band, "steelblue", 0.3);
        let line: Vec<(f64, f64)> =
            labels.iter().enumerate().map(|(i, v)| frame.map(i as f64, *v)).collect();
        canvas.polyline(&line, "black", 1.0);
        canvas.text(4.0, frame.top + 12.0, 10.0, name);
    }
    std::fs::write(path, canvas.finish()).map_err(|e| io_err(path, e))
}

/// Writes the trajectory CSV (poses, 2D covariance entries, truth) and
/// the x-y plot with 2-sigma compound-covariance ellipses.
pub fn write_trajectory_outputs(
    records: &[EvaluationRecord],
    csv_path: &Path,
    svg_path: &Path,
) -> Result<(), EvalError> {
    let traj = match trajectory_eval(records, UncertaintySource::Total, CompoundOrder::Fourth) {
        Ok(t) => t,
        Err(e) => {
            std::fs::write(csv_path, format!("# trajectory unavailable: {e}\n"))
                .map_err(|er| io_err(csv_path, er))?;
            std::fs::write(svg_path, SvgCanvas::new(100.0, 40.0).finish())
                .map_err(|er| io_err(svg_path, er))?;
            return Ok(());
        }
    };
    let mut csv = String::from("step,x,y,z,sxx,sxy,syy,truth_x,truth_y,truth_z\n");
    let mut truth_acc: Option<Pose> = None;
    for (i, step) in traj.per_step.iter().enumerate() {
        truth_acc = Some(match truth_acc {
            None => records[0].truth,
            Some(acc) => acc.compose(&records[i].truth),
        });
        let t = step.pose.translation();
        let tt = truth_acc.as_ref().unwrap().translation();
        csv.push_str(&format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}\n",
            i,
            t[0], t[1], t[2],
            step.covariance[(0, 0)], step.covariance[(0, 1)], step.covariance[(1, 1)],
            tt[0], tt[1], tt[2],
        ));
    }
    std::fs::write(csv_path, csv).map_err(|e| io_err(csv_path, e))?;

    // x-y path with 2 sigma ellipses of the compound covariance.
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for step in &traj.per_step {
        xs.push(step.pose.translation()[0]);
        ys.push(step.pose.translation()[1]);
    }
    let pad = 1.0
        + traj.per_step.iter().map(|s| s.covariance[(0, 0)].max(s.covariance[(1, 1)]).sqrt() * 2.0).fold(0.0f64, f64::max);
    let (x_min, x_max) = bounds(&xs, pad);
    let (y_min, y_max) = bounds(&ys, pad);
    let mut canvas = SvgCanvas::new(640.0, 480.0);
    let frame = Frame { x_min, x_max, y_min, y_max, left: 40.0, top: 20.0, width: 580.0, height: 440.0 };
    let est_path: Vec<(f64, f64)> = xs.iter().zip(&ys).map(|(x, y)| frame.map(*x, *y)).collect();
    canvas.polyline(&est_path, "black", 1.5);
    let mut truth_path = Vec::new();
    let mut acc: Option<Pose> = None;
    for r in records {
        acc = Some(match acc {
            None => r.truth,
            Some(prev) => prev.compose(&r.truth),
        });
        let t = acc.as_ref().unwrap().translation();
        truth_path.push(frame.map(t[0], t[1]));
    }
    canvas.polyline(&truth_path, "green", 1.0);
    let stride = (traj.per_step.len() / 8).max(1);
    for (i, step) in traj.per_step.iter().enumerate() {
        if i % stride != 0 && i + 1 != traj.per_step.len() {
            continue;
        }
        let sub = nalgebra::Matrix2::new(
            step.covariance[(0, 0)],
            step.covariance[(0, 1)],
            step.covariance[(1, 0)],
            step.covariance[(1, 1)],
        );
        let eig = nalgebra::SymmetricEigen::new(sub);
        let (a, b) = (eig.eigenvalues[0].max(0.0).sqrt() * 2.0, eig.eigenvalues[1].max(0.0).sqrt() * 2.0);
        let angle = eig.eigenvectors[(1, 0)].atan2(eig.eigenvectors[(0, 0)]).to_degrees();
        let (cx, cy) = frame.map(step.pose.translation()[0], step.pose.translation()[1]);
        let scale = frame.scale_x();
        canvas.ellipse(cx, cy, a * scale, b * scale, -angle, "steelblue");
    }
    canvas.text(10.0, 14.0, 10.0, "trajectory: estimate (black), truth (green), 2-sigma compound covariance");
    std::fs::write(svg_path, canvas.finish()).map_err(|e| io_err(svg_path, e))
}

fn bounds(vals: &[f64], pad: f64) -> (f64, f64) {
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo - pad, hi + pad)
}

/// Epistemic trace per sample normalized by the mean total trace of the
/// record set; the dimensionless series plotted and compared across runs.
pub fn normalized_epistemic(records: &[EvaluationRecord]) -> Vec<f64> {
    if records.is_empty() {
        return Vec::new();
    }
    let mean_total: f64 =
        records.iter().map(|r| r.total.trace()).sum::<f64>() / records.len() as f64;
    records.iter().map(|r| r.epistemic_trace / mean_total.max(1e-300)).collect()
}

/// Epistemic trace per sample, normalized by the mean total trace, with an
/// optional comparison series (direct vs fine-tuned).
fn write_epistemic_svg(
    records: &[EvaluationRecord],
    compare: Option<&[f64]>,
    path: &Path,
) -> Result<(), EvalError> {
    let normalized = normalized_epistemic(records);
    let y_max = normalized
        .iter()
        .chain(compare.unwrap_or(&[]).iter())
        .fold(1e-12f64, |acc, v| acc.max(*v));
    let mut canvas = SvgCanvas::new(640.0, 240.0);
    let frame = Frame {
        x_min: 0.0,
        x_max: (records.len().max(2) - 1) as f64,
        y_min: 0.0,
        y_max,
        left: 40.0,
        top: 20.0,
        width: 580.0,
        height: 200.0,
    };
    let line: Vec<(f64, f64)> =
        normalized.iter().enumerate().map(|(i, v)| frame.map(i as f64, *v)).collect();
    canvas.polyline(&line, "black", 1.2);
    if let Some(other) = compare {
        let line2: Vec<(f64, f64)> =
            other.iter().enumerate().map(|(i, v)| frame.map(i as f64, *v)).collect();
        canvas.polyline(&line2, "crimson", 1.2);
        canvas.text(10.0, 12.0, 10.0, "epistemic trace / mean total trace: current (black) vs compare (crimson)");
    } else {
        canvas.text(10.0, 12.0, 10.0, "epistemic trace / mean total trace");
    }
    std::fs::write(path, canvas.finish()).map_err(|e| io_err(path, e))
}
