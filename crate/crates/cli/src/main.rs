//! Single-binary workflow: scene generation, dataset building, training,
//! fine-tuning, inference, evaluation and plotting.
//!
//! All randomness flows from one seed through named derivation, so every
//! stage is reproducible; primary outputs are byte-identical across
//! repeat runs and thread counts. Exit codes: 0 success, 1 numerical or
//! runtime failure, 2 usage error.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use icpcov::bayes::{mc_predict, mc_report_from_samples, McConfig};
use icpcov::dataset::{
    assign_splits, build_dataset, load_dataset, load_kitti_sequence, save_dataset, Dataset,
    InitialGuessConfig, SequenceScans, Split,
};
use icpcov::evaluation::{
    calibration_report, evaluate_dataset, load_records, mahalanobis, nne, normalized_epistemic,
    save_records, trajectory_eval, write_trajectory_outputs, Block, EvaluationRecord,
    UncertaintySource,
};
use icpcov::icp::IcpConfig;
use icpcov::net::NetworkParameters;
use icpcov::pointcloud::{read_ply, write_ply, write_velodyne_bin};
use icpcov::se3::CompoundOrder;
use icpcov::seeding::derive_seed;
use icpcov::sim::{make_scene, render_scan, save_scene, trajectory_poses, Archetype, SceneParams};
use icpcov::training::{finetune, train, write_training_log, Checkpoint, TrainConfig};
use icpcov::{NetworkConfig, Pose, PointCloud, SensorModel};

/// Error that should map to exit code 2 (bad invocation, not a runtime
/// failure).
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

#[derive(Parser)]
#[command(name = "icpcov", version, about = "Learned 6x6 covariance estimation for ICP registration")]
struct Cli {
    /// JSON config file with defaults for every stage (flags override).
    /// Falls back to the ICPCOV_CONFIG environment variable.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Rayon worker threads (outputs are identical for any value).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes with scan sequences and ground-truth poses.
    GenScenes(GenScenesArgs),
    /// Build a labeled registration dataset from scan sequences.
    MakeDataset(MakeDatasetArgs),
    /// Train the uncertainty network on a dataset.
    Train(TrainArgs),
    /// Continue training from a checkpoint on a new dataset.
    Finetune(FinetuneArgs),
    /// Print the uncertainty report for one dataset pair as JSON.
    Infer(InferArgs),
    /// Single-pair calibration metrics and report files.
    EvalSingle(EvalSingleArgs),
    /// Trajectory composition with propagated covariances.
    EvalTraj(EvalTrajArgs),
    /// Render plots from saved evaluation records.
    Plot(PlotArgs),
}

#[derive(Args)]
struct GenScenesArgs {
    /// corridor, plain, structured, or all.
    #[arg(long)]
    archetype: String,
    /// Scenes (sequences) per archetype.
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scans per sequence.
    #[arg(long, default_value_t = 11)]
    scans: usize,
    /// Forward step between scans (meters).
    #[arg(long, default_value_t = 0.5)]
    step: f64,
    /// Scan file format: ply or bin (KITTI velodyne layout).
    #[arg(long, default_value = "ply")]
    format: String,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    rings: Option<usize>,
    #[arg(long)]
    azimuths: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
}

#[derive(Args)]
struct MakeDatasetArgs {
    /// Directory of sequences (each with poses.txt and scans/), or one
    /// sequence directory.
    #[arg(long)]
    scans: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Require KITTI velodyne .bin scans.
    #[arg(long)]
    kitti: bool,
    /// Independently sampled guesses per scan pair.
    #[arg(long, default_value_t = 1)]
    guesses_per_pair: usize,
    /// Plain-text key=value ICP config file.
    #[arg(long)]
    icp_config: Option<PathBuf>,
    #[arg(long)]
    subsample: Option<usize>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    trim_ratio: Option<f64>,
    #[arg(long)]
    normal_k: Option<usize>,
    #[arg(long)]
    translation_epsilon: Option<f64>,
    #[arg(long)]
    rotation_epsilon: Option<f64>,
    #[arg(long)]
    guess_a: Option<f64>,
    #[arg(long)]
    guess_b: Option<f64>,
    /// Fraction of sequences held out for validation.
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// desk, full, or a path to a NetworkConfig JSON file.
    #[arg(long, default_value = "desk")]
    net: String,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
    /// Comma-separated layer-name prefixes to freeze ("all" for every
    /// parameter).
    #[arg(long)]
    frozen: Option<String>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Sample index within the dataset.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Single deterministic pass instead of MC dropout.
    #[arg(long)]
    no_dropout: bool,
    /// Network config (defaults to net_config.json beside the checkpoint).
    #[arg(long)]
    net: Option<String>,
}

#[derive(Args)]
struct EvalSingleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// validation, train or all.
    #[arg(long, default_value = "validation")]
    split: String,
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    net: Option<String>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalTrajArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "validation")]
    split: String,
    /// Sequence index within the split (default: first).
    #[arg(long)]
    sequence: Option<usize>,
    /// Covariance compounding: second or fourth.
    #[arg(long, default_value = "fourth")]
    order: String,
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    net: Option<String>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct PlotArgs {
    /// records.json produced by eval-single / eval-traj.
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Second records.json for the epistemic comparison plot.
    #[arg(long)]
    compare: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

/// Optional defaults loaded from --config / ICPCOV_CONFIG.
#[derive(Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    icp: Option<IcpConfig>,
    guess: Option<InitialGuessConfig>,
    sensor: Option<SensorModel>,
    net: Option<NetworkConfig>,
    train: Option<TrainConfig>,
    mc_samples: Option<usize>,
    scene: Option<SceneParams>,
}

fn load_file_config(cli: &Cli) -> Result<FileConfig> {
    let path = cli
        .config
        .clone()
        .or_else(|| std::env::var_os("ICPCOV_CONFIG").map(PathBuf::from));
    let Some(path) = path else { return Ok(FileConfig::default()) };
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        // Determinism does not depend on the pool size; this only bounds
        // parallelism.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<UsageError>()) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let file_cfg = load_file_config(&cli)?;
    match cli.command {
        Command::GenScenes(a) => gen_scenes(a, &file_cfg),
        Command::MakeDataset(a) => make_dataset(a, &file_cfg),
        Command::Train(a) => train_cmd(a, &file_cfg, None),
        Command::Finetune(a) => train_cmd(a.train, &file_cfg, Some(a.checkpoint)),
        Command::Infer(a) => infer(a, &file_cfg),
        Command::EvalSingle(a) => eval_single(a, &file_cfg),
        Command::EvalTraj(a) => eval_traj(a, &file_cfg),
        Command::Plot(a) => plot(a),
    }
}

/// Refuses to write into a non-empty directory unless forced.
fn ensure_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(usage(format!(
                "output directory {} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn write_run_config<T: Serialize>(dir: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    std::fs::write(dir.join("run_config.json"), json)
        .with_context(|| format!("writing run_config.json in {}", dir.display()))
}

fn parse_archetypes(name: &str) -> Result<Vec<Archetype>> {
    if name == "all" {
        return Ok(vec![Archetype::Corridor, Archetype::Plain, Archetype::Structured]);
    }
    name.parse::<Archetype>().map(|a| vec![a]).map_err(|e| usage(e.to_string()))
}

fn parse_split(name: &str) -> Result<Option<Split>> {
    match name {
        "validation" => Ok(Some(Split::Validation)),
        "train" => Ok(Some(Split::Train)),
        "all" => Ok(None),
        other => Err(usage(format!("unknown split '{other}' (validation, train, all)"))),
    }
}

// ---------------------------------------------------------------------
// gen-scenes
// ---------------------------------------------------------------------

#[derive(Serialize)]
struct GenScenesEcho {
    command: &'static str,
    seed: u64,
    archetypes: Vec<String>,
    count: usize,
    scans: usize,
    step: f64,
    format: String,
    sensor: SensorModel,
    scene: SceneParams,
}

fn gen_scenes(a: GenScenesArgs, file_cfg: &FileConfig) -> Result<()> {
    let archetypes = parse_archetypes(&a.archetype)?;
    if a.count == 0 || a.scans < 2 {
        return Err(usage("need count >= 1 and scans >= 2"));
    }
    if a.format != "ply" && a.format != "bin" {
        return Err(usage(format!("unknown scan format '{}' (ply or bin)", a.format)));
    }
    ensure_out_dir(&a.out, a.force)?;
    let mut sensor = file_cfg.sensor.unwrap_or_default();
    if let Some(r) = a.rings {
        sensor.rings = r;
    }
    if let Some(az) = a.azimuths {
        sensor.azimuths = az;
    }
    if let Some(ns) = a.noise_sigma {
        sensor.noise_sigma = ns;
    }
    let params = file_cfg.scene.clone().unwrap_or_default();

    for arch in &archetypes {
        for i in 0..a.count {
            let tag = ((*arch as u64) << 32) | i as u64;
            let scene = make_scene(*arch, &params, derive_seed(a.seed, "scene", tag));
            let poses = trajectory_poses(*arch, &params, a.scans, a.step, derive_seed(a.seed, "traj", tag))?;
            let seq_dir = a.out.join(format!("seq_{arch}_{i:03}"));
            let scans_dir = seq_dir.join("scans");
            std::fs::create_dir_all(&scans_dir)?;
            save_scene(&scene, &seq_dir.join("scene.txt"))?;
            let mut pose_lines = String::new();
            for (j, pose) in poses.iter().enumerate() {
                let scan = render_scan(&scene, pose, &sensor, derive_seed(a.seed, "scan", (tag << 16) | j as u64))
                    .with_context(|| format!("rendering scan {j} of {seq_dir:?}"))?;
                match a.format.as_str() {
                    "ply" => write_ply(&scan, &scans_dir.join(format!("{j:06}.ply")))?,
                    _ => write_velodyne_bin(&scan, &scans_dir.join(format!("{j:06}.bin")))?,
                }
                pose_lines.push_str(&pose.to_kitti_line());
                pose_lines.push('\n');
            }
            std::fs::write(seq_dir.join("poses.txt"), pose_lines)?;
            println!("wrote {} ({} scans)", seq_dir.display(), a.scans);
        }
    }
    write_run_config(
        &a.out,
        &GenScenesEcho {
            command: "gen-scenes",
            seed: a.seed,
            archetypes: archetypes.iter().map(|x| x.to_string()).collect(),
            count: a.count,
            scans: a.scans,
            step: a.step,
            format: a.format.clone(),
            sensor,
            scene: params,
        },
    )
}

// ---------------------------------------------------------------------
// make-dataset
// ---------------------------------------------------------------------

fn load_sequence_dir(dir: &Path, require_bin: bool) -> Result<SequenceScans> {
    let poses_path = dir.join("poses.txt");
    let scans_dir = dir.join("scans");
    let mut files: Vec<PathBuf> = std::fs::read_dir(&scans_dir)
        .with_context(|| format!("reading {}", scans_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "ply" || x == "bin")
        })
        .collect();
    files.sort();
    let has_bin = files.iter().any(|p| p.extension().is_some_and(|x| x == "bin"));
    if require_bin && !has_bin {
        return Err(usage(format!("{}: --kitti requires .bin scans", dir.display())));
    }
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    if has_bin {
        let scans = load_kitti_sequence(&scans_dir, &poses_path)?;
        return Ok(SequenceScans { name, scans });
    }
    let pose_text = std::fs::read_to_string(&poses_path)
        .with_context(|| format!("reading {}", poses_path.display()))?;
    let poses: Vec<Pose> = pose_text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(Pose::from_kitti_line)
        .collect::<Result<_, _>>()?;
    if poses.len() != files.len() {
        return Err(anyhow::anyhow!(
            "{}: {} scans but {} poses",
            dir.display(),
            files.len(),
            poses.len()
        ));
    }
    let clouds: Vec<PointCloud> = files.iter().map(|p| read_ply(p)).collect::<Result<_, _>>()?;
    Ok(SequenceScans { name, scans: clouds.into_iter().zip(poses).collect() })
}

fn discover_sequences(root: &Path, require_bin: bool) -> Result<Vec<SequenceScans>> {
    if root.join("poses.txt").exists() {
        return Ok(vec![load_sequence_dir(root, require_bin)?]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .with_context(|| format!("reading {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join("poses.txt").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(usage(format!("{} contains no sequence directories", root.display())));
    }
    dirs.iter().map(|d| load_sequence_dir(d, require_bin)).collect()
}

#[derive(Serialize)]
struct MakeDatasetEcho {
    command: &'static str,
    seed: u64,
    icp: IcpConfig,
    guess: InitialGuessConfig,
    guesses_per_pair: usize,
    val_fraction: f64,
}

fn make_dataset(a: MakeDatasetArgs, file_cfg: &FileConfig) -> Result<()> {
    ensure_out_dir(&a.out, a.force)?;
    let mut icp = match &a.icp_config {
        Some(path) => IcpConfig::from_kv_file(path)?,
        None => file_cfg.icp.clone().unwrap_or_default(),
    };
    if let Some(v) = a.subsample {
        icp.subsample_size = v;
    }
    if let Some(v) = a.max_iterations {
        icp.max_iterations = v;
    }
    if let Some(v) = a.trim_ratio {
        icp.trim_ratio = v;
    }
    if let Some(v) = a.normal_k {
        icp.normal_k = v;
    }
    if let Some(v) = a.translation_epsilon {
        icp.translation_epsilon = v;
    }
    if let Some(v) = a.rotation_epsilon {
        icp.rotation_epsilon = v;
    }
    let mut guess = file_cfg.guess.clone().unwrap_or_default();
    if let Some(v) = a.guess_a {
        guess.a = v;
    }
    if let Some(v) = a.guess_b {
        guess.b = v;
    }

    let sequences = discover_sequences(&a.scans, a.kitti)?;
    let mut dataset = build_dataset(&sequences, &icp, &guess, a.seed, a.guesses_per_pair)?;
    assign_splits(&mut dataset, a.val_fraction, a.seed);
    save_dataset(&dataset, &a.out)?;
    let (converged, failed) = dataset.convergence_stats();
    println!(
        "dataset: {} sequences, {} samples ({} converged, {} flagged)",
        dataset.manifest.sequences.len(),
        dataset.samples.len(),
        converged,
        failed
    );
    write_run_config(
        &a.out,
        &MakeDatasetEcho {
            command: "make-dataset",
            seed: a.seed,
            icp: dataset.manifest.icp.clone(),
            guess: dataset.manifest.guess.clone(),
            guesses_per_pair: a.guesses_per_pair,
            val_fraction: a.val_fraction,
        },
    )
}

// ---------------------------------------------------------------------
// train / finetune
// ---------------------------------------------------------------------

fn resolve_net(spec: &str, file_cfg: &FileConfig) -> Result<NetworkConfig> {
    match spec {
        "desk" => Ok(file_cfg.net.clone().unwrap_or_else(NetworkConfig::desk_scale)),
        "full" => Ok(NetworkConfig::full_scale()),
        path => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("network config {path}: {e}")))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("network config {path}: {e}")))
        }
    }
}

/// Network config for a checkpoint: the --net flag, or the
/// net_config.json written beside the checkpoint at training time.
fn net_for_checkpoint(net_flag: &Option<String>, ckpt: &Path, file_cfg: &FileConfig) -> Result<NetworkConfig> {
    if let Some(spec) = net_flag {
        return resolve_net(spec, file_cfg);
    }
    let sibling = ckpt.parent().unwrap_or(Path::new(".")).join("net_config.json");
    if sibling.exists() {
        let text = std::fs::read_to_string(&sibling)?;
        return serde_json::from_str(&text)
            .map_err(|e| anyhow::anyhow!("{}: {e}", sibling.display()));
    }
    Err(usage(format!(
        "no --net given and {} does not exist",
        sibling.display()
    )))
}

#[derive(Serialize)]
struct TrainEcho {
    command: &'static str,
    train: TrainConfig,
    net_hash: String,
    finetune_from: Option<String>,
}

fn train_cmd(a: TrainArgs, file_cfg: &FileConfig, from_checkpoint: Option<PathBuf>) -> Result<()> {
    ensure_out_dir(&a.out, a.force)?;
    let mut net = resolve_net(&a.net, file_cfg)?;
    if let Some(d) = a.dropout {
        net.dropout_rate = d;
    }
    let mut cfg = file_cfg.train.clone().unwrap_or_default();
    // Fine-tuning defaults to a short schedule.
    if from_checkpoint.is_some() {
        cfg.epochs = cfg.epochs.min(30);
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.learning_rate = lr;
    }
    if let Some(b) = a.batch {
        cfg.batch_size = b;
    }
    if let Some(c) = a.clip {
        cfg.gradient_clip_norm = c;
    }
    if let Some(f) = &a.frozen {
        cfg.frozen_segments = f.split(',').map(|s| s.trim().to_string()).collect();
    }
    cfg.seed = a.seed;

    let dataset = load_dataset(&a.dataset)?;
    let outcome = match &from_checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path, &net)?;
            finetune(ckpt, &dataset, &net, &cfg)?
        }
        None => train(&dataset, &net, &cfg)?,
    };

    outcome.checkpoint.save(&a.out.join("checkpoint.bin"))?;
    outcome.final_params.save(&a.out.join("final_params.bin"))?;
    write_training_log(&outcome.log, &a.out.join("train_log.csv"))?;
    std::fs::write(a.out.join("net_config.json"), serde_json::to_string_pretty(&net)?)?;
    write_run_config(
        &a.out,
        &TrainEcho {
            command: if from_checkpoint.is_some() { "finetune" } else { "train" },
            train: cfg.clone(),
            net_hash: net.config_hash(),
            finetune_from: from_checkpoint.map(|p| p.display().to_string()),
        },
    )?;
    for e in &outcome.log {
        println!(
            "epoch {:>3}: train_nll {:.6} val_nll {:.6}",
            e.epoch, e.train_nll, e.val_nll
        );
    }
    println!(
        "best val_nll {:.6} at epoch {}",
        outcome.checkpoint.best_val_nll, outcome.checkpoint.epoch
    );
    if outcome.diverged {
        return Err(anyhow::anyhow!(
            "training diverged; last good checkpoint written to {}",
            a.out.join("checkpoint.bin").display()
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------
// infer / eval
// ---------------------------------------------------------------------

fn infer(a: InferArgs, file_cfg: &FileConfig) -> Result<()> {
    let net = net_for_checkpoint(&a.net, &a.checkpoint, file_cfg)?;
    let params = NetworkParameters::load(&a.checkpoint, &net)?;
    let dataset = load_dataset(&a.dataset)?;
    let sample = dataset
        .samples
        .get(a.index)
        .ok_or_else(|| usage(format!("index {} out of range ({} samples)", a.index, dataset.samples.len())))?;
    let report = if a.no_dropout {
        let pred = icpcov::bayes::predict_deterministic(&sample.pair, &params, &net)?;
        mc_report_from_samples(&[pred.mu.as_vector()], &[*pred.covariance().matrix()], a.seed)?
    } else {
        let mc = McConfig {
            num_samples: a.mc_samples.or(file_cfg.mc_samples).unwrap_or(32),
            base_seed: a.seed,
        };
        mc_predict(&sample.pair, &params, &net, &mc)?
    };
    println!("{}", report.to_json());
    Ok(())
}

fn records_for(
    a_split: &str,
    dataset: &Dataset,
    params: &NetworkParameters,
    net: &NetworkConfig,
    mc: &McConfig,
) -> Result<Vec<EvaluationRecord>> {
    match parse_split(a_split)? {
        Some(split) => Ok(evaluate_dataset(dataset, split, params, net, mc)?),
        None => {
            let mut all = evaluate_dataset(dataset, Split::Train, params, net, mc)?;
            all.extend(evaluate_dataset(dataset, Split::Validation, params, net, mc).unwrap_or_default());
            Ok(all)
        }
    }
}

#[derive(Serialize)]
struct EvalEcho {
    command: &'static str,
    split: String,
    mc_samples: usize,
    seed: u64,
    net_hash: String,
}

fn eval_single(a: EvalSingleArgs, file_cfg: &FileConfig) -> Result<()> {
    ensure_out_dir(&a.out, a.force)?;
    let net = net_for_checkpoint(&a.net, &a.checkpoint, file_cfg)?;
    let params = NetworkParameters::load(&a.checkpoint, &net)?;
    let dataset = load_dataset(&a.dataset)?;
    let mc = McConfig {
        num_samples: a.mc_samples.or(file_cfg.mc_samples).unwrap_or(32),
        base_seed: a.seed,
    };
    let records = records_for(&a.split, &dataset, &params, &net, &mc)?;
    let files = calibration_report(&records, &a.out, None)?;
    for block in [Block::Translation, Block::Rotation] {
        let n = nne(&records, block)?;
        let d = mahalanobis(&records, block)?;
        println!("{block:?}: NNE {n:.4}  D_M {d:.4}");
    }
    println!("report written to {}", files.metrics_csv.parent().unwrap().display());
    write_run_config(
        &a.out,
        &EvalEcho {
            command: "eval-single",
            split: a.split.clone(),
            mc_samples: mc.num_samples,
            seed: a.seed,
            net_hash: net.config_hash(),
        },
    )
}

fn eval_traj(a: EvalTrajArgs, file_cfg: &FileConfig) -> Result<()> {
    ensure_out_dir(&a.out, a.force)?;
    let net = net_for_checkpoint(&a.net, &a.checkpoint, file_cfg)?;
    let params = NetworkParameters::load(&a.checkpoint, &net)?;
    let dataset = load_dataset(&a.dataset)?;
    let order = match a.order.as_str() {
        "second" => CompoundOrder::Second,
        "fourth" => CompoundOrder::Fourth,
        other => return Err(usage(format!("unknown order '{other}' (second or fourth)"))),
    };
    let split = parse_split(&a.split)?;
    // Pick one sequence; a trajectory needs consecutive pairs.
    let seq_indices: Vec<usize> = dataset
        .manifest
        .sequences
        .iter()
        .enumerate()
        .filter(|(_, s)| split.is_none_or(|sp| s.split == sp))
        .map(|(i, _)| i)
        .collect();
    let seq = match a.sequence {
        Some(s) if seq_indices.contains(&s) => s,
        Some(s) => return Err(usage(format!("sequence {s} not in split {}", a.split))),
        None => *seq_indices
            .first()
            .ok_or_else(|| usage(format!("no sequences in split {}", a.split)))?,
    };
    let mc = McConfig {
        num_samples: a.mc_samples.or(file_cfg.mc_samples).unwrap_or(32),
        base_seed: a.seed,
    };
    let indices: Vec<usize> = (dataset.manifest.sequences[seq].first_sample
        ..dataset.manifest.sequences[seq].first_sample + dataset.manifest.sequences[seq].sample_count)
        .collect();
    // First guess per pair only: the chain follows the physical sequence.
    let sub = Dataset {
        manifest: dataset.manifest.clone(),
        samples: indices
            .iter()
            .map(|&i| dataset.samples[i].clone())
            .filter(|s| s.guess_index == 0)
            .collect(),
    };
    let results: Vec<EvaluationRecord> = sub
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| -> Result<EvaluationRecord> {
            let mc_i = McConfig { num_samples: mc.num_samples, base_seed: mc.base_seed.wrapping_add((i as u64) << 10) };
            let report = mc_predict(&s.pair, &params, &net, &mc_i)?;
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
        .collect::<Result<_>>()?;

    let traj = trajectory_eval(&results, UncertaintySource::Total, order)?;
    save_records(&results, &a.out.join("records.json"))?;
    write_trajectory_outputs(&results, &a.out.join("trajectory.csv"), &a.out.join("trajectory.svg"))?;
    println!(
        "sequence {} ({} steps): final D_M translation {:.4} rotation {:.4} full {:.4}",
        dataset.manifest.sequences[seq].name,
        results.len(),
        traj.dm_translation,
        traj.dm_rotation,
        traj.dm_full
    );
    write_run_config(
        &a.out,
        &EvalEcho {
            command: "eval-traj",
            split: a.split.clone(),
            mc_samples: mc.num_samples,
            seed: a.seed,
            net_hash: net.config_hash(),
        },
    )
}

fn plot(a: PlotArgs) -> Result<()> {
    ensure_out_dir(&a.out, a.force)?;
    let records = load_records(&a.records)?;
    let compare = match &a.compare {
        Some(path) => Some(normalized_epistemic(&load_records(path)?)),
        None => None,
    };
    let files = calibration_report(&records, &a.out, compare.as_deref())?;
    println!("plots written to {}", files.bands_svg.parent().unwrap().display());
    Ok(())
}
