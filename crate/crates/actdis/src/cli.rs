//! Command-line front end: dataset synthesis, two-stage training,
//! recognition evaluation, specification-robustness sweeps, temporal
//! localization, and the end-to-end gradient check. Every command writes a
//! canonical configuration echo next to its outputs; reports are
//! line-delimited records plus aligned text tables.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error, 3 verification
//! failure.

use crate::config::{ConfigError, RunConfig};
use crate::eval::{
    collect_frame_weights, frame_level_ap, localization_grid, recognition_eval, robustness_sweep,
    EvalError, LocalizationGrid, RecognitionEval, SweepRow, GRID_THRESHOLDS,
};
use crate::model::Model;
use crate::ssg::{Dataset, SsgError};
use crate::synth::{generate_split, GenError};
use crate::train::{
    load_checkpoint, run_gradcheck, save_checkpoint, train, TrainError, CHECKPOINT_FILE,
};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const ECHO_FILE: &str = "config_echo.txt";
pub const TRAIN_SPLIT: &str = "train.jsonl";
pub const VAL_SPLIT: &str = "val.jsonl";

#[derive(Parser, Debug)]
#[command(
    name = "actdis",
    version,
    about = "Prompt-guided action disentanglement over spatio-temporal scene graphs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct CommonArgs {
    /// Configuration file (flat `key = value` lines; defaults apply when
    /// absent).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the configured random seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for all outputs of this command.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic train/val scene-graph splits.
    Synth {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train the model: stage 1, stage 2, or (default) both in sequence.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory holding train.jsonl (defaults to --out).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Starting checkpoint (required when training stage 2 alone).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Train only this stage (1 or 2).
        #[arg(long)]
        stage: Option<u8>,
    },
    /// Score the recognition heads on the validation split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory holding val.jsonl (defaults to --out).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Trained checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Sweep specification robustness of the specification head by label
    /// count.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Probe only distractor-injected specifications (default: both
        /// families).
        #[arg(long)]
        injected: bool,
    },
    /// Localize actions from specification-branch frame weights.
    Localize {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Frame-weight binarization threshold for the focal report cell.
        #[arg(long)]
        theta: Option<f64>,
        /// Segment-matching IoU threshold for the focal report cell.
        #[arg(long)]
        iou: Option<f64>,
        /// Probe with distractor-injected specifications.
        #[arg(long)]
        injected: bool,
    },
    /// Check reverse-mode gradients of a small end-to-end model against
    /// central differences.
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or arguments → exit 1.
    Usage(String),
    /// Valid request that failed while running → exit 2.
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}
impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::Runtime(e.to_string())
    }
}
impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Runtime(e.to_string())
    }
}
impl From<SsgError> for CliError {
    fn from(e: SsgError) -> Self {
        CliError::Runtime(e.to_string())
    }
}
impl From<GenError> for CliError {
    fn from(e: GenError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Run one parsed command; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Synth { common } => cmd_synth(&common),
        Command::Train { common, dataset, checkpoint, stage } => {
            cmd_train(&common, dataset.as_deref(), checkpoint.as_deref(), stage)
        }
        Command::Eval { common, dataset, checkpoint } => {
            cmd_eval(&common, dataset.as_deref(), &checkpoint)
        }
        Command::Sweep { common, dataset, checkpoint, injected } => {
            cmd_sweep(&common, dataset.as_deref(), &checkpoint, injected)
        }
        Command::Localize { common, dataset, checkpoint, theta, iou, injected } => {
            cmd_localize(&common, dataset.as_deref(), &checkpoint, theta, iou, injected)
        }
        Command::Gradcheck { common } => cmd_gradcheck(&common),
    }
}

// ── shared plumbing ─────────────────────────────────────────────────────

fn load_config(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_outputs(out: &Path, cfg: &RunConfig, files: &[(&str, &[u8])]) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let echo = out.join(ECHO_FILE);
    std::fs::write(&echo, cfg.echo()).map_err(io_err(&echo))?;
    for (name, bytes) in files {
        let path = out.join(name);
        std::fs::write(&path, bytes).map_err(io_err(&path))?;
    }
    Ok(())
}

fn jsonl<T: Serialize>(records: &[T]) -> Result<Vec<u8>, CliError> {
    let mut bytes = Vec::new();
    for r in records {
        let line = serde_json::to_vec(r)
            .map_err(|e| CliError::Runtime(format!("serialization: {e}")))?;
        bytes.extend_from_slice(&line);
        bytes.push(b'\n');
    }
    Ok(bytes)
}

fn load_split(
    cfg: &RunConfig,
    dataset: Option<&Path>,
    out: &Path,
    split: &str,
) -> Result<Dataset, CliError> {
    let dir = dataset.unwrap_or(out);
    let path = dir.join(split);
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "dataset file {} not found (generate it with `actdis synth`)",
            path.display()
        )));
    }
    Ok(Dataset::load(&path, &cfg.vocab())?)
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<Model, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!("checkpoint {} not found", path.display())));
    }
    let (model, _, _) = load_checkpoint(path)?;
    if model.cfg.action_classes != cfg.actions
        || model.cfg.frames != cfg.frames
        || model.cfg.max_nodes != cfg.max_nodes
    {
        return Err(CliError::Usage(format!(
            "checkpoint was trained for C={}, N={}, M={} but the configuration says \
             C={}, N={}, M={}",
            model.cfg.action_classes,
            model.cfg.frames,
            model.cfg.max_nodes,
            cfg.actions,
            cfg.frames,
            cfg.max_nodes
        )));
    }
    Ok(model)
}

// ── commands ────────────────────────────────────────────────────────────

fn cmd_synth(common: &CommonArgs) -> Result<i32, CliError> {
    let cfg = load_config(common)?;
    let gen = cfg.gen_config();
    let train_split = generate_split(&gen, "train", cfg.train_videos)?;
    let val_split = generate_split(&gen, "val", cfg.val_videos)?;
    write_outputs(&common.out, &cfg, &[])?;
    train_split.save(&common.out.join(TRAIN_SPLIT))?;
    val_split.save(&common.out.join(VAL_SPLIT))?;
    println!(
        "wrote {} train / {} val videos to {}",
        train_split.len(),
        val_split.len(),
        common.out.display()
    );
    Ok(0)
}

fn cmd_train(
    common: &CommonArgs,
    dataset: Option<&Path>,
    checkpoint: Option<&Path>,
    stage: Option<u8>,
) -> Result<i32, CliError> {
    if let Some(s) = stage {
        if !(1..=2).contains(&s) {
            return Err(CliError::Usage(format!("--stage must be 1 or 2, got {s}")));
        }
    }
    let cfg = load_config(common)?;
    let data = load_split(&cfg, dataset, &common.out, TRAIN_SPLIT)?;
    write_outputs(&common.out, &cfg, &[])?;

    let mut model = match (stage, checkpoint) {
        (Some(2), None) => {
            return Err(CliError::Usage(
                "--stage 2 needs --checkpoint with a stage-1 model".into(),
            ))
        }
        (_, Some(path)) => load_model(&cfg, path)?,
        (_, None) => Model::new(cfg.model_config(), cfg.seed),
    };

    let stages: &[u8] = match stage {
        Some(1) => &[1],
        Some(2) => &[2],
        _ => &[1, 2],
        // unreachable for other values: validated above
    };
    for &s in stages {
        let dir = common.out.join(format!("stage{s}"));
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let settings = cfg.train_settings(s);
        println!("stage {s}: {} epochs on {} videos", settings.epochs, data.len());
        let outcome = train(&mut model, &data, &settings, Some(&dir))?;
        for e in &outcome.history {
            println!(
                "  epoch {:>3}  total {:.5}  (u {:.4} s {:.4} t {:.4} m {:.4} dis {:.4} rec {:.4})",
                e.epoch, e.total, e.bce_u, e.bce_s, e.bce_t, e.bce_m, e.dis, e.rec
            );
        }
        if let Some(reason) = outcome.aborted {
            return Err(CliError::Runtime(format!(
                "stage {s} aborted ({reason}); last good checkpoint kept in {}",
                dir.display()
            )));
        }
        save_checkpoint(&model, s, settings.epochs, &dir.join(CHECKPOINT_FILE))?;
        println!("stage {s} done → {}", dir.join(CHECKPOINT_FILE).display());
    }
    Ok(0)
}

fn recognition_table(r: &RecognitionEval) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<22} {:>8}", "head", "mAP");
    let _ = writeln!(s, "{:<22} {:>8.4}", "fused (a_t)", r.map_t);
    let _ = writeln!(s, "{:<22} {:>8.4}", "auxiliary (a_m)", r.map_m);
    let _ = writeln!(s, "{:<22} {:>8.4}", "specification (a_s)", r.map_s);
    if r.classes_skipped > 0 {
        let _ = writeln!(s, "({} positive-free classes skipped)", r.classes_skipped);
    }
    s
}

fn cmd_eval(
    common: &CommonArgs,
    dataset: Option<&Path>,
    checkpoint: &Path,
) -> Result<i32, CliError> {
    let cfg = load_config(common)?;
    let data = load_split(&cfg, dataset, &common.out, VAL_SPLIT)?;
    let model = load_model(&cfg, checkpoint)?;
    let report = recognition_eval(&model, &data)?;
    let table = recognition_table(&report);
    write_outputs(
        &common.out,
        &cfg,
        &[
            ("recognition.jsonl", &jsonl(&[&report])?),
            ("recognition.txt", table.as_bytes()),
        ],
    )?;
    print!("{table}");
    Ok(0)
}

fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<10} {:>7} {:>7} {:>7} {:>10} {:>10}",
        "family", "labels", "videos", "trials", "mean mAP", "std"
    );
    for r in rows {
        let family = if r.injected { "injected" } else { "plain" };
        let labels = r.label_count.map_or("all".to_string(), |l| l.to_string());
        let _ = writeln!(
            s,
            "{:<10} {:>7} {:>7} {:>7} {:>10.4} {:>10.4}",
            family, labels, r.videos, r.trials, r.mean_map, r.std_map
        );
    }
    s
}

fn cmd_sweep(
    common: &CommonArgs,
    dataset: Option<&Path>,
    checkpoint: &Path,
    injected_only: bool,
) -> Result<i32, CliError> {
    let cfg = load_config(common)?;
    let data = load_split(&cfg, dataset, &common.out, VAL_SPLIT)?;
    let model = load_model(&cfg, checkpoint)?;
    let families: &[bool] = if injected_only { &[true] } else { &[false, true] };
    let mut rows = Vec::new();
    for &family in families {
        rows.extend(robustness_sweep(&model, &data, family, cfg.k, cfg.trials, cfg.seed)?);
    }
    let table = sweep_table(&rows);
    write_outputs(
        &common.out,
        &cfg,
        &[("sweep.jsonl", &jsonl(&rows)?), ("sweep.txt", table.as_bytes())],
    )?;
    print!("{table}");
    Ok(0)
}

#[derive(Serialize)]
struct FocalCell {
    theta: f64,
    iou: f64,
    map: f64,
}

#[derive(Serialize)]
struct FrameWeightDump<'a> {
    video: usize,
    /// `weights[class][frame]`.
    weights: &'a [Vec<f64>],
}

fn grid_table(grid: &LocalizationGrid, focal: &FocalCell, frame_ap: Option<f64>) -> String {
    let mut s = String::new();
    let _ = write!(s, "{:>9}", "theta\\iou");
    for iou in &grid.ious {
        let _ = write!(s, " {iou:>8.2}");
    }
    let _ = writeln!(s);
    for (i, theta) in grid.thetas.iter().enumerate() {
        let _ = write!(s, "{theta:>9.2}");
        for v in &grid.map[i] {
            let _ = write!(s, " {v:>8.4}");
        }
        let _ = writeln!(s);
    }
    let _ = writeln!(
        s,
        "focal cell: theta {:.2}, IoU {:.2} → mAP {:.4}",
        focal.theta, focal.iou, focal.map
    );
    if let Some(ap) = frame_ap {
        let _ = writeln!(s, "frame-level mAP: {ap:.4}");
    }
    s
}

fn cmd_localize(
    common: &CommonArgs,
    dataset: Option<&Path>,
    checkpoint: &Path,
    theta: Option<f64>,
    iou: Option<f64>,
    injected: bool,
) -> Result<i32, CliError> {
    let mut cfg = load_config(common)?;
    if let Some(t) = theta {
        cfg.theta = t;
    }
    if let Some(i) = iou {
        cfg.iou = i;
    }
    cfg.validate()?;
    let data = load_split(&cfg, dataset, &common.out, VAL_SPLIT)?;
    let model = load_model(&cfg, checkpoint)?;
    let classes = model.cfg.action_classes;
    let weights = collect_frame_weights(&model, &data, injected, cfg.k, cfg.seed)?;
    let grid = localization_grid(&weights, &data, classes, &GRID_THRESHOLDS, &GRID_THRESHOLDS)?;
    let focal_grid = localization_grid(&weights, &data, classes, &[cfg.theta], &[cfg.iou])?;
    let focal = FocalCell { theta: cfg.theta, iou: cfg.iou, map: focal_grid.map[0][0] };
    let frame_ap = if cfg.per_frame {
        Some(frame_level_ap(&weights, &data, classes)?.map)
    } else {
        None
    };

    let mut report = jsonl(&[&grid])?;
    report.extend_from_slice(&jsonl(&[&focal])?);
    if let Some(ap) = frame_ap {
        report.extend_from_slice(&jsonl(&[serde_json::json!({ "frame_level_map": ap })])?);
    }
    let dumps: Vec<FrameWeightDump> = weights
        .iter()
        .enumerate()
        .map(|(video, w)| FrameWeightDump { video, weights: w })
        .collect();
    let table = grid_table(&grid, &focal, frame_ap);
    write_outputs(
        &common.out,
        &cfg,
        &[
            ("localization.jsonl", &report),
            ("frame_weights.jsonl", &jsonl(&dumps)?),
            ("localization.txt", table.as_bytes()),
        ],
    )?;
    print!("{table}");
    Ok(0)
}

fn cmd_gradcheck(common: &CommonArgs) -> Result<i32, CliError> {
    let cfg = load_config(common)?;
    let report = run_gradcheck(cfg.seed, 1e-5, 1e-5)?;
    let line = serde_json::to_vec(&report)
        .map_err(|e| CliError::Runtime(format!("serialization: {e}")))?;
    let mut bytes = line;
    bytes.push(b'\n');
    write_outputs(&common.out, &cfg, &[("gradcheck.json", &bytes)])?;
    println!("{report}");
    if report.pass {
        Ok(0)
    } else {
        Ok(3)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::error::ErrorKind;

    #[test]
    fn unknown_flags_fail_to_parse() {
        let err = Cli::try_parse_from(["actdis", "synth", "--bogus"]).unwrap_err();
        assert_eq!(err.kind(), ErrorKind::UnknownArgument);
        assert!(Cli::try_parse_from(["actdis", "frobnicate"]).is_err());
    }

    #[test]
    fn commands_parse_with_their_flags() {
        let cli = Cli::try_parse_from([
            "actdis", "localize", "--checkpoint", "c.json", "--theta", "0.5", "--iou", "0.2",
            "--injected", "--out", "reports",
        ])
        .unwrap();
        match cli.command {
            Command::Localize { theta, iou, injected, common, .. } => {
                assert_eq!(theta, Some(0.5));
                assert_eq!(iou, Some(0.2));
                assert!(injected);
                assert_eq!(common.out, PathBuf::from("reports"));
            }
            other => panic!("parsed {other:?}"),
        }
        assert!(Cli::try_parse_from(["actdis", "eval"]).is_err(), "--checkpoint is required");
    }

    #[test]
    fn usage_errors_exit_one_without_writing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("never");
        let cli = Cli::try_parse_from([
            "actdis",
            "train",
            "--stage",
            "7",
            "--out",
            out.to_str().unwrap(),
        ])
        .unwrap();
        assert_eq!(run(cli), 1);
        assert!(!out.exists(), "usage failure must not create outputs");
    }

    #[test]
    fn missing_dataset_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let cli = Cli::try_parse_from([
            "actdis",
            "train",
            "--out",
            dir.path().join("x").to_str().unwrap(),
        ])
        .unwrap();
        assert_eq!(run(cli), 1);
    }

    #[test]
    fn stage_two_without_checkpoint_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        // A dataset must exist so the command reaches the stage logic.
        let cfg = RunConfig { train_videos: 2, ..RunConfig::default() };
        let data = generate_split(&cfg.gen_config(), "train", 2).unwrap();
        data.save(&out.join(TRAIN_SPLIT)).unwrap();
        let cli = Cli::try_parse_from([
            "actdis",
            "train",
            "--stage",
            "2",
            "--out",
            out.to_str().unwrap(),
        ])
        .unwrap();
        assert_eq!(run(cli), 1);
    }
}
