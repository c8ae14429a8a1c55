//! Two-stage training: specification-pair sampling, per-sample gradient
//! accumulation, a per-parameter adaptive optimizer, running-mean commits
//! from encoder statistics, per-epoch atomic checkpoints and a line-delimited
//! metrics log. Also hosts the end-to-end finite-difference gradient check.

use crate::actionspec::{build_pairs, ActionSpecPair, SpecError};
use crate::model::{ForwardOutput, Model, ModelConfig};
use crate::objective::{
    disentangle_term, expand_mask, reconstruction_term, total_loss, LossBreakdown, LossWeights,
};
use crate::ssg::{Dataset, SceneGraphSequence};
use crate::synth::derive_seed;
use gradtape::{ParamStore64, Tape64, TapeError, Tensor64, ValueId};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.display().to_string(), source }
}

/// Knobs of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSettings {
    /// 1 = end-to-end with all losses; 2 = heads only, classification only.
    pub stage: u8,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Hot entries per distractor-injected specification.
    pub k: usize,
    pub weights: LossWeights,
    /// Stage 2: re-initialize the classifier heads instead of fine-tuning
    /// the stage-1 values.
    pub reinit_heads: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            stage: 1,
            epochs: 12,
            batch_size: 8,
            lr: 1e-3,
            seed: 7,
            k: 3,
            weights: LossWeights::default(),
            reinit_heads: false,
        }
    }
}

/// Loss means over one epoch's samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub stage: u8,
    pub total: f64,
    pub bce_u: f64,
    pub bce_s: f64,
    pub bce_t: f64,
    /// Auxiliary-head loss; only meaningful in stage 2.
    pub bce_m: f64,
    pub dis: f64,
    pub rec: f64,
    /// Videos whose correlation hit the zero-variance guard.
    pub degenerate_correlations: usize,
    pub samples: usize,
    /// Wall-clock time; logged but kept out of serialized artifacts so
    /// repeated runs produce byte-identical files.
    #[serde(skip_serializing, default)]
    pub seconds: f64,
}

pub struct TrainOutput {
    pub epochs_run: usize,
    pub history: Vec<EpochStats>,
    /// Set when divergence aborted the run; the model then holds the last
    /// epoch's (good) parameters.
    pub aborted: Option<String>,
}

// ── optimizer ───────────────────────────────────────────────────────────

/// Frame-scorer step size relative to the base learning rate; see
/// [`Optimizer`].
pub const FRAME_LR_SCALE: f64 = 10.0;

/// Momentum-free adaptive step: each parameter keeps a decayed average of
/// its squared gradients and is stepped by `lr * g / (sqrt(acc) + 1e-8)`.
///
/// The readout frame scorers are the exception: they step by plain
/// `frame_lr * g`. The normalized global readout leaves a systematic but
/// vanishing common-mode gradient on the frame scores (through its epsilon
/// term), and the adaptive rule — whose step size ignores gradient
/// magnitude — would amplify that drift until every score saturates flat,
/// wiping out the per-frame contrasts the localization signal is made of.
pub struct Optimizer {
    pub lr: f64,
    /// Plain step size for the frame scorers.
    pub frame_lr: f64,
    acc: Vec<Vec<f64>>,
    plain: Vec<bool>,
}

impl Optimizer {
    pub fn new(store: &ParamStore64, lr: f64) -> Self {
        let acc = store.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect();
        let plain = store.iter().map(|(_, p)| p.name.contains(".frame_")).collect();
        Optimizer { lr, frame_lr: lr * FRAME_LR_SCALE, acc, plain }
    }

    /// Apply one accumulated-gradient step. `grads[i]` pairs with parameter
    /// index `i`; `None` means no gradient reached it this batch.
    pub fn step(
        &mut self,
        store: &mut ParamStore64,
        grads: &[Option<Vec<f64>>],
    ) -> Result<(), TrainError> {
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (idx, id) in ids.iter().enumerate() {
            let Some(g) = grads[idx].as_ref() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::Invalid(format!(
                    "non-finite gradient for {}",
                    store.get(*id).name
                )));
            }
            let p = store.get_mut(*id);
            debug_assert!(p.trainable);
            let data = p.tensor.data_mut();
            if self.plain[idx] {
                for i in 0..data.len() {
                    data[i] -= self.frame_lr * g[i];
                }
                continue;
            }
            let acc = &mut self.acc[idx];
            for i in 0..data.len() {
                acc[i] = 0.99 * acc[i] + 0.01 * g[i] * g[i];
                data[i] -= self.lr * g[i] / (acc[i].sqrt() + 1e-8);
            }
        }
        Ok(())
    }
}

// ── checkpoints ─────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct ParamWire {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
    trainable: bool,
}

/// Checkpoint payload: model geometry, training position, and every
/// parameter tensor (running means included).
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ModelConfig,
    pub stage: u8,
    pub epoch: usize,
    params: Vec<ParamWire>,
}

impl Checkpoint {
    pub fn of(model: &Model, stage: u8, epoch: usize) -> Self {
        Checkpoint {
            format_version: 1,
            model: model.cfg.clone(),
            stage,
            epoch,
            params: model
                .store
                .iter()
                .map(|(_, p)| ParamWire {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    data: p.tensor.data().to_vec(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }

    pub fn into_model(self) -> Result<Model, TrainError> {
        let mut store = ParamStore64::new();
        for p in self.params {
            let tensor = Tensor64::from_vec(p.shape.clone(), p.data).map_err(|e| {
                TrainError::Invalid(format!("checkpoint parameter {}: {}", p.name, e))
            })?;
            store
                .add(&p.name, tensor, p.trainable)
                .map_err(|e| TrainError::Invalid(e.to_string()))?;
        }
        Ok(Model { cfg: self.model, store })
    }
}

/// Write bytes atomically: temp file in the same directory, then rename.
fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), TrainError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn save_checkpoint(model: &Model, stage: u8, epoch: usize, path: &Path) -> Result<(), TrainError> {
    let ckpt = Checkpoint::of(model, stage, epoch);
    let mut bytes = serde_json::to_vec(&ckpt)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, u8, usize), TrainError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let ckpt: Checkpoint = serde_json::from_slice(&bytes)?;
    if ckpt.format_version != 1 {
        return Err(TrainError::Invalid(format!(
            "unsupported checkpoint version {}",
            ckpt.format_version
        )));
    }
    let (stage, epoch) = (ckpt.stage, ckpt.epoch);
    Ok((ckpt.into_model()?, stage, epoch))
}

// ── per-sample objective ────────────────────────────────────────────────

/// Which loss terms a pass assembles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveMode {
    /// Classification + decorrelation + reconstruction (stage 1).
    Stage1,
    /// Classification only, auxiliary head included (stage 2).
    Stage2,
    /// Every term at once; exercised by the gradient check.
    Full,
}

impl ObjectiveMode {
    fn of_stage(stage: u8) -> Self {
        if stage == 2 {
            ObjectiveMode::Stage2
        } else {
            ObjectiveMode::Stage1
        }
    }

    fn wants_aux(self) -> bool {
        !matches!(self, ObjectiveMode::Stage1)
    }
}

pub struct SampleLoss {
    pub total: ValueId,
    pub breakdown: LossBreakdown,
    pub bce_m: Option<ValueId>,
    pub degenerate_correlation: bool,
}

/// Truth labels padded with the no-action flag (clear whenever any label
/// is set), the target vector for the fused and auxiliary heads.
pub fn padded_truth(truth: &[u8]) -> Vec<u8> {
    let mut y = truth.to_vec();
    y.push(u8::from(truth.iter().all(|&v| v == 0)));
    y
}

/// Assemble the training objective for one (video, specification pair)
/// sample from a finished forward pass.
pub fn sample_objective(
    tape: &mut Tape64,
    out: &ForwardOutput,
    pair: &ActionSpecPair,
    truth: &[u8],
    mask: &[bool],
    dim: usize,
    w: &LossWeights,
    mode: ObjectiveMode,
) -> Result<SampleLoss, TrainError> {
    let y_t = padded_truth(truth);
    let (dis, rec, degenerate) = if matches!(mode, ObjectiveMode::Stage2) {
        let zero = tape.scalar_const(0.0)?;
        (zero, zero, false)
    } else {
        let elem = expand_mask(mask, dim);
        let (dis, degenerate) =
            disentangle_term(tape, out.f_u, out.f_s, Some(elem.as_slice()), w.m1)?;
        let rec = reconstruction_term(tape, out.f_o, out.f_r, mask, w.m2)?;
        (dis, rec, degenerate)
    };
    let eff = if matches!(mode, ObjectiveMode::Stage2) {
        LossWeights { lambda4: 0.0, ..*w }
    } else {
        *w
    };
    let breakdown =
        total_loss(tape, out.a_u, &pair.y_u, out.a_s, &pair.y_s, out.a_t, &y_t, dis, rec, &eff)?;
    let (total, bce_m) = if mode.wants_aux() {
        let a_m = out.a_m.ok_or_else(|| {
            TrainError::Invalid("auxiliary logits missing for a mode that trains them".into())
        })?;
        let bce_m = crate::objective::bce_head(tape, a_m, &y_t)?;
        (tape.add(breakdown.total, bce_m)?, Some(bce_m))
    } else {
        (breakdown.total, None)
    };
    Ok(SampleLoss { total, breakdown, bce_m, degenerate_correlation: degenerate })
}

// ── the training loop ───────────────────────────────────────────────────

/// File names written under the output directory.
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const MANIFEST_FILE: &str = "manifest.txt";

fn manifest_text(model: &ModelConfig, settings: &TrainSettings, history: &[EpochStats]) -> String {
    let mut s = String::new();
    let model_echo = serde_json::to_value(model).expect("config serializes");
    let train_echo = serde_json::to_value(settings).expect("settings serialize");
    let mut lines = Vec::new();
    for (prefix, value) in [("model", model_echo), ("train", train_echo)] {
        if let serde_json::Value::Object(map) = value {
            for (k, v) in map {
                lines.push(format!("{prefix}.{k}={v}"));
            }
        }
    }
    lines.sort();
    for line in lines {
        let _ = writeln!(s, "{line}");
    }
    let _ = writeln!(s, "epochs_completed={}", history.len());
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:>5} {:>5} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
        "epoch", "stage", "total", "bce_u", "bce_s", "bce_t", "bce_m", "dis", "rec"
    );
    for e in history {
        let _ = writeln!(
            s,
            "{:>5} {:>5} {:>10.5} {:>10.5} {:>10.5} {:>10.5} {:>10.5} {:>10.5} {:>10.5}",
            e.epoch, e.stage, e.total, e.bce_u, e.bce_s, e.bce_t, e.bce_m, e.dis, e.rec
        );
    }
    s
}

struct EpochAccumulator {
    total: f64,
    bce_u: f64,
    bce_s: f64,
    bce_t: f64,
    bce_m: f64,
    dis: f64,
    rec: f64,
    degenerate: usize,
    samples: usize,
}

impl EpochAccumulator {
    fn new() -> Self {
        EpochAccumulator {
            total: 0.0,
            bce_u: 0.0,
            bce_s: 0.0,
            bce_t: 0.0,
            bce_m: 0.0,
            dis: 0.0,
            rec: 0.0,
            degenerate: 0,
            samples: 0,
        }
    }

    fn push(&mut self, tape: &Tape64, loss: &SampleLoss) {
        let item = |id: ValueId| tape.value(id).item();
        self.total += item(loss.total);
        self.bce_u += item(loss.breakdown.bce_u);
        self.bce_s += item(loss.breakdown.bce_s);
        self.bce_t += item(loss.breakdown.bce_t);
        self.bce_m += loss.bce_m.map_or(0.0, item);
        self.dis += item(loss.breakdown.dis);
        self.rec += item(loss.breakdown.rec);
        self.degenerate += usize::from(loss.degenerate_correlation);
        self.samples += 1;
    }

    fn stats(&self, epoch: usize, stage: u8, seconds: f64) -> EpochStats {
        let n = self.samples.max(1) as f64;
        EpochStats {
            epoch,
            stage,
            total: self.total / n,
            bce_u: self.bce_u / n,
            bce_s: self.bce_s / n,
            bce_t: self.bce_t / n,
            bce_m: self.bce_m / n,
            dis: self.dis / n,
            rec: self.rec / n,
            degenerate_correlations: self.degenerate,
            samples: self.samples,
            seconds,
        }
    }
}

/// Level-2 seed namespaces under the run seed.
const NS_PAIRS: u64 = 1;
const NS_SHUFFLE: u64 = 2;
const NS_NOISE: u64 = 3;
const NS_GRADCHECK: u64 = 4;

/// Train `model` on `data`. Writes per-epoch artifacts when `out_dir` is
/// given; always keeps an in-memory copy of the last completed epoch's
/// parameters so divergence can roll back to them.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    settings: &TrainSettings,
    out_dir: Option<&Path>,
) -> Result<TrainOutput, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Invalid("empty training dataset".into()));
    }
    if settings.batch_size == 0 {
        return Err(TrainError::Invalid("batch size must be positive".into()));
    }
    if !(1..=2).contains(&settings.stage) {
        return Err(TrainError::Invalid(format!("stage must be 1 or 2, got {}", settings.stage)));
    }
    model.set_stage(settings.stage);
    if settings.stage == 2 && settings.reinit_heads {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(settings.seed, &[9]));
        let (d, c) = (model.cfg.dim, model.cfg.action_classes);
        let bound = (6.0 / (d + c + 1) as f64).sqrt();
        for head in ["u", "s", "t", "m"] {
            let id = model.store.lookup(&format!("head.{head}.w")).expect("head");
            let data: Vec<f64> =
                (0..d * (c + 1)).map(|_| rand::Rng::gen_range(&mut rng, -bound..bound)).collect();
            model.store.get_mut(id).tensor = Tensor64::from_vec(vec![d, c + 1], data).unwrap();
            let id = model.store.lookup(&format!("head.{head}.b")).expect("head");
            model.store.get_mut(id).tensor = Tensor64::zeros(&[c + 1]);
        }
    }
    let mode = ObjectiveMode::of_stage(settings.stage);
    let mut optimizer = Optimizer::new(&model.store, settings.lr);
    let mut history: Vec<EpochStats> = Vec::new();
    let mut last_good: Vec<Tensor64> =
        model.store.iter().map(|(_, p)| p.tensor.clone()).collect();

    let metrics_path = out_dir.map(|d| d.join(METRICS_FILE));
    if let Some(p) = &metrics_path {
        fs::write(p, b"").map_err(io_err(p))?;
    }

    let mut abort: Option<String> = None;
    'epochs: for epoch in 0..settings.epochs {
        let started = std::time::Instant::now();
        // Per-video specification pairs, reconstructed each epoch from a
        // seed namespace independent of iteration order.
        let mut pair_sets: Vec<Vec<ActionSpecPair>> = Vec::with_capacity(data.len());
        for (v, rec) in data.records.iter().enumerate() {
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(
                settings.seed,
                &[NS_PAIRS, epoch as u64, v as u64],
            ));
            let batch = build_pairs(&rec.ann.labels, settings.k, &mut rng)?;
            pair_sets.push(batch.pairs);
        }
        let mut samples: Vec<(usize, usize)> = pair_sets
            .iter()
            .enumerate()
            .flat_map(|(v, ps)| (0..ps.len()).map(move |p| (v, p)))
            .collect();
        let mut shuffle_rng =
            ChaCha12Rng::seed_from_u64(derive_seed(settings.seed, &[NS_SHUFFLE, epoch as u64]));
        samples.shuffle(&mut shuffle_rng);

        let mut acc = EpochAccumulator::new();
        for batch in samples.chunks(settings.batch_size) {
            let mut grad_sums: Vec<Option<Vec<f64>>> = vec![None; model.store.len()];
            let inv_b = 1.0 / batch.len() as f64;
            let n = model.cfg.frames;
            let mut mu_sums = vec![0.0f64; n];
            let mut mu_counts = vec![0.0f64; n];
            for &(v, p) in batch {
                let rec = &data.records[v];
                let pair = &pair_sets[v][p];
                let mut noise_rng = ChaCha12Rng::seed_from_u64(derive_seed(
                    settings.seed,
                    &[NS_NOISE, epoch as u64, v as u64, p as u64],
                ));
                let result = (|| -> Result<(), TrainError> {
                    let mut tape = Tape64::new();
                    let (out, binds) = model.forward(
                        &mut tape,
                        &rec.seq,
                        &pair.sap,
                        &pair.uap,
                        mode.wants_aux(),
                        Some(&mut noise_rng),
                    )?;
                    let loss = sample_objective(
                        &mut tape,
                        &out,
                        pair,
                        &rec.ann.labels,
                        &rec.seq.node_mask,
                        model.cfg.dim,
                        &settings.weights,
                        mode,
                    )?;
                    let grads = tape.backward(loss.total)?;
                    for (idx, (pid, param)) in model.store.iter().enumerate() {
                        if !param.trainable {
                            continue;
                        }
                        if let Some(g) = grads.get(binds.id(pid)) {
                            let sum =
                                grad_sums[idx].get_or_insert_with(|| vec![0.0; g.numel()]);
                            for (s, &gi) in sum.iter_mut().zip(g.data()) {
                                *s += gi * inv_b;
                            }
                        }
                    }
                    for i in 0..n {
                        mu_sums[i] += out.fo_frame_sums[i];
                        mu_counts[i] += out.fo_frame_counts[i];
                    }
                    acc.push(&tape, &loss);
                    Ok(())
                })();
                if let Err(e) = result {
                    abort = Some(format!("epoch {epoch}: {e}"));
                    break 'epochs;
                }
            }
            if let Err(e) = optimizer.step(&mut model.store, &grad_sums) {
                abort = Some(format!("epoch {epoch}: {e}"));
                break 'epochs;
            }
            // Commit running means from the batch's encoder statistics; the
            // same update reaches every layer's state. Backbone state is
            // frozen in stage 2.
            if settings.stage == 1 {
                for l in 0..model.cfg.layers {
                    let mut mu_g = model.mu_g(l);
                    for i in 0..n {
                        if mu_counts[i] > 0.0 {
                            let mu = mu_sums[i] / mu_counts[i];
                            mu_g[i] =
                                model.cfg.momentum * mu_g[i] + (1.0 - model.cfg.momentum) * mu;
                        }
                    }
                    model.set_mu_g(l, &mu_g);
                }
            }
        }
        let stats = acc.stats(epoch, settings.stage, started.elapsed().as_secs_f64());
        if !stats.total.is_finite() {
            abort = Some(format!("epoch {epoch}: non-finite mean loss"));
            break 'epochs;
        }
        history.push(stats.clone());
        last_good = model.store.iter().map(|(_, p)| p.tensor.clone()).collect();
        if let Some(dir) = out_dir {
            save_checkpoint(model, settings.stage, epoch, &dir.join(CHECKPOINT_FILE))?;
            if let Some(p) = &metrics_path {
                let mut line = serde_json::to_vec(&stats)?;
                line.push(b'\n');
                use std::io::Write as _;
                let mut f = fs::OpenOptions::new()
                    .append(true)
                    .open(p)
                    .map_err(io_err(p))?;
                f.write_all(&line).map_err(io_err(p))?;
            }
            atomic_write(
                &dir.join(MANIFEST_FILE),
                manifest_text(&model.cfg, settings, &history).as_bytes(),
            )?;
        }
        log::info!(
            "epoch {epoch}: total {:.5} (u {:.4} s {:.4} t {:.4} m {:.4} dis {:.4} rec {:.4}) in {:.1}s",
            history.last().unwrap().total,
            history.last().unwrap().bce_u,
            history.last().unwrap().bce_s,
            history.last().unwrap().bce_t,
            history.last().unwrap().bce_m,
            history.last().unwrap().dis,
            history.last().unwrap().rec,
            history.last().unwrap().seconds
        );
    }

    if abort.is_some() {
        // Roll back to the last completed epoch's parameters.
        let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
        for (idx, id) in ids.into_iter().enumerate() {
            model.store.get_mut(id).tensor = last_good[idx].clone();
        }
    }
    Ok(TrainOutput { epochs_run: history.len(), history, aborted: abort })
}

// ── end-to-end gradient check ───────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FdEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FdReport {
    pub pass: bool,
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: Option<FdEntry>,
    /// Wall-clock time; logged but kept out of serialized artifacts so
    /// repeated runs produce byte-identical files.
    #[serde(skip_serializing, default)]
    pub seconds: f64,
}

impl std::fmt::Display for FdReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} partials, max rel err {:.3e} in {:.1}s",
            if self.pass { "pass" } else { "FAIL" },
            self.checked,
            self.max_rel_err,
            self.seconds
        )?;
        if let Some(w) = &self.worst {
            write!(
                f,
                " (worst {}[{}]: analytic {:.6e} vs numeric {:.6e})",
                w.name, w.index, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

/// Central-difference check of every trainable parameter of a small
/// end-to-end model against the reverse-mode gradients, using the full
/// objective (classification + auxiliary + decorrelation + reconstruction
/// with zero margins, so no term sits in a clamp's dead zone).
pub fn run_gradcheck(seed: u64, eps: f64, tol: f64) -> Result<FdReport, TrainError> {
    let started = std::time::Instant::now();
    let mut model = Model::new(ModelConfig::tiny(), seed);
    let videos = gradcheck_batch();
    let weights = LossWeights { m1: 0.0, m2: 0.0, ..LossWeights::default() };

    type Built = (Tape64, ValueId, Vec<Vec<ValueId>>, Vec<(f64, f64)>);
    let build = |model: &Model| -> Result<Built, TrainError> {
        let mut tape = Tape64::new();
        let mut total: Option<ValueId> = None;
        let mut leaf_sets = Vec::with_capacity(videos.len());
        let mut terms = Vec::with_capacity(videos.len());
        for (seq, truth, pair) in &videos {
            let (out, binds) = model.forward(&mut tape, seq, &pair.sap, &pair.uap, true, None)?;
            let loss = sample_objective(
                &mut tape,
                &out,
                pair,
                truth,
                &seq.node_mask,
                model.cfg.dim,
                &weights,
                ObjectiveMode::Full,
            )?;
            total = Some(match total {
                None => loss.total,
                Some(t) => tape.add(t, loss.total)?,
            });
            terms.push((
                tape.value(loss.breakdown.dis).item(),
                tape.value(loss.breakdown.rec).item(),
            ));
            leaf_sets.push(model.store.iter().map(|(pid, _)| binds.id(pid)).collect());
        }
        Ok((tape, total.expect("at least one video"), leaf_sets, terms))
    };
    let loss_of = |model: &Model| -> Result<f64, TrainError> {
        let (tape, total, _, _) = build(model)?;
        Ok(tape.value(total).item())
    };

    // A central difference at a fixed step cannot resolve a partial whose
    // magnitude sits near the f64 cancellation noise of the loss
    // evaluation (~1e-10 here): the comparison would measure noise, not
    // gradient quality. The structured initialization helps — its symmetry
    // zeros (zero-initialized final layers, zero running means) leave the
    // loss exactly independent of those parameters, so both sides are
    // exactly zero — but the smallest *live* partial depends on the
    // initializer draw. Search the model seed until every live partial
    // clears the resolving floor; the decision uses only analytic
    // gradients, never the comparison outcome.
    let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
    for attempt in 0.. {
        model = Model::new(ModelConfig::tiny(), derive_seed(seed, &[NS_GRADCHECK, attempt]));
        let (tape, total, leaf_sets, terms) = build(&model)?;
        let all_grads = tape.backward(total)?;
        // Sum each parameter's gradient across the per-video leaf bindings.
        grads = (0..model.store.iter().count())
            .map(|p| {
                let mut acc: Option<Vec<f64>> = None;
                for set in &leaf_sets {
                    if let Some(t) = all_grads.get(set[p]) {
                        match &mut acc {
                            None => acc = Some(t.data().to_vec()),
                            Some(a) => a.iter_mut().zip(t.data()).for_each(|(x, y)| *x += y),
                        }
                    }
                }
                acc
            })
            .collect();
        // A partial in the middle band is invisible to the oracle: too
        // small for its relative error to stay under tolerance against
        // ~ulp(loss)/(2*eps) noise, too large for the metric's 1e-8
        // absolute floor (which covers partials whose loss perturbation
        // rounds away entirely).
        let in_dead_band = grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|g| g.abs())
            .filter(|&g| (1e-13..4e-6).contains(&g))
            .count();
        // Every loss term must also be live for every video, with clear
        // distance from its clamp boundary (the margins are zero, so the
        // term's own value is that distance).
        let active = terms.iter().all(|&(d, r)| d > 1e-3 && r > 1e-3);
        log::debug!(
            "gradcheck seed attempt {attempt}: {in_dead_band} partials in dead band, \
             losses active: {active}"
        );
        if (in_dead_band == 0 && active) || attempt >= 31 {
            break;
        }
    }
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    let mut max_rel_err = 0.0f64;
    let mut worst: Option<FdEntry> = None;
    let mut checked = 0usize;
    for (idx, id) in ids.iter().enumerate() {
        if !model.store.get(*id).trainable {
            continue;
        }
        let numel = model.store.get(*id).tensor.numel();
        for i in 0..numel {
            let orig = model.store.get(*id).tensor.data()[i];
            model.store.get_mut(*id).tensor.data_mut()[i] = orig + eps;
            let plus = loss_of(&model)?;
            model.store.get_mut(*id).tensor.data_mut()[i] = orig - eps;
            let minus = loss_of(&model)?;
            model.store.get_mut(*id).tensor.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads[idx].as_ref().map_or(0.0, |g| g[i]);
            let rel = (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs());
            checked += 1;
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = Some(FdEntry {
                    name: model.store.get(*id).name.clone(),
                    index: i,
                    analytic,
                    numeric,
                    rel_err: rel,
                });
            }
        }
    }
    Ok(FdReport {
        pass: max_rel_err <= tol,
        max_rel_err,
        checked,
        worst,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Two frames, two live nodes, edges both ways with distinct types: every
/// pathway (attention, gating, normalization, both branches) is exercised.
fn gradcheck_sequence() -> SceneGraphSequence {
    use crate::ssg::Relation;
    SceneGraphSequence {
        video_id: "gradcheck".into(),
        num_frames: 2,
        max_nodes: 2,
        node_class: vec![1, 2, 3, 1],
        node_mask: vec![true; 4],
        relations: vec![
            Relation { frame: 0, src: 0, dst: 1, rel: 0 },
            Relation { frame: 0, src: 1, dst: 0, rel: 2 },
            Relation { frame: 1, src: 0, dst: 1, rel: 1 },
        ],
    }
}

/// Two tiny videos with different node classes, relation patterns, and
/// specification pairs. Summing the objective over both keeps every
/// parameter's total influence generic — a single video leaves more
/// partials near accidental zero crossings, where central differences
/// cannot resolve them.
fn gradcheck_batch() -> Vec<(SceneGraphSequence, Vec<u8>, crate::actionspec::ActionSpecPair)> {
    use crate::ssg::Relation;
    let seq_a = gradcheck_sequence();
    let truth_a = vec![1u8, 0, 1];
    let pair_a = crate::actionspec::pair_from_sap(vec![1, 0, 0], &truth_a, false);
    let seq_b = SceneGraphSequence {
        video_id: "gradcheck-b".into(),
        num_frames: 2,
        max_nodes: 2,
        node_class: vec![3, 1, 2, 2],
        node_mask: vec![true; 4],
        relations: vec![
            Relation { frame: 0, src: 1, dst: 0, rel: 3 },
            Relation { frame: 1, src: 0, dst: 1, rel: 2 },
            Relation { frame: 1, src: 1, dst: 0, rel: 0 },
        ],
    };
    let truth_b = vec![0u8, 1, 1];
    let pair_b = crate::actionspec::pair_from_sap(vec![0, 1, 1], &truth_b, true);
    vec![(seq_a, truth_a, pair_a), (seq_b, truth_b, pair_b)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_split, GenConfig};

    fn tiny_gen() -> GenConfig {
        GenConfig {
            actions: 4,
            frames: 4,
            max_nodes: 6,
            object_vocab: 6,
            l_max: 2,
            min_duration: 2,
            max_duration: 3,
            relation_noise: 0.0,
            feature_noise: 0.0,
            seed: 21,
        }
    }

    fn tiny_train_model(gen: &GenConfig, seed: u64) -> Model {
        let vocab = gen.vocab();
        Model::new(
            ModelConfig {
                action_classes: gen.actions,
                object_classes: vocab.object_classes as usize,
                relation_types: vocab.relation_types as usize,
                frames: gen.frames,
                max_nodes: gen.max_nodes,
                dim: 6,
                prompts: 2,
                layers: 1,
                hidden: 6,
                feature_noise: 0.0,
                ..ModelConfig::tiny()
            },
            seed,
        )
    }

    fn mean_sample_loss(model: &Model, data: &Dataset, settings: &TrainSettings) -> f64 {
        let mode = ObjectiveMode::of_stage(settings.stage);
        let mut total = 0.0;
        let mut count = 0usize;
        for (v, rec) in data.records.iter().enumerate() {
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(
                settings.seed,
                &[NS_PAIRS, 0, v as u64],
            ));
            let pairs = build_pairs(&rec.ann.labels, settings.k, &mut rng).unwrap().pairs;
            for pair in &pairs {
                let mut tape = Tape64::new();
                let (out, _) = model
                    .forward(&mut tape, &rec.seq, &pair.sap, &pair.uap, mode.wants_aux(), None)
                    .unwrap();
                let loss = sample_objective(
                    &mut tape,
                    &out,
                    pair,
                    &rec.ann.labels,
                    &rec.seq.node_mask,
                    model.cfg.dim,
                    &settings.weights,
                    mode,
                )
                .unwrap();
                total += tape.value(loss.total).item();
                count += 1;
            }
        }
        total / count as f64
    }

    fn smoke_settings() -> TrainSettings {
        TrainSettings {
            epochs: 1,
            batch_size: 4,
            lr: 3e-3,
            seed: 5,
            k: 2,
            ..TrainSettings::default()
        }
    }

    #[test]
    fn one_epoch_reduces_training_loss() {
        let gen = tiny_gen();
        let data = generate_split(&gen, "train", 10).unwrap();
        let mut model = tiny_train_model(&gen, 1);
        let settings = smoke_settings();
        let before = mean_sample_loss(&model, &data, &settings);
        let out = train(&mut model, &data, &settings, None).unwrap();
        assert!(out.aborted.is_none());
        assert_eq!(out.epochs_run, 1);
        let after = mean_sample_loss(&model, &data, &settings);
        assert!(after < before, "loss must drop: {before} -> {after}");
    }

    #[test]
    fn fixed_seed_gives_identical_checkpoint_bytes() {
        let gen = tiny_gen();
        let data = generate_split(&gen, "train", 6).unwrap();
        let run = |dir: &Path| {
            let mut model = tiny_train_model(&gen, 2);
            let settings = TrainSettings { epochs: 2, ..smoke_settings() };
            train(&mut model, &data, &settings, Some(dir)).unwrap();
            fs::read(dir.join(CHECKPOINT_FILE)).unwrap()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        assert_eq!(run(d1.path()), run(d2.path()));
    }

    #[test]
    fn checkpoint_round_trips_through_disk() {
        let gen = tiny_gen();
        let data = generate_split(&gen, "train", 4).unwrap();
        let mut model = tiny_train_model(&gen, 3);
        let dir = tempfile::tempdir().unwrap();
        train(&mut model, &data, &smoke_settings(), Some(dir.path())).unwrap();
        let (loaded, stage, epoch) = load_checkpoint(&dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(stage, 1);
        assert_eq!(epoch, 0);
        assert_eq!(loaded.store.len(), model.store.len());
        for ((_, a), (_, b)) in loaded.store.iter().zip(model.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
        }
    }

    #[test]
    fn stage_two_leaves_backbone_bitwise_identical() {
        let gen = tiny_gen();
        let data = generate_split(&gen, "train", 6).unwrap();
        let mut model = tiny_train_model(&gen, 4);
        let s1 = smoke_settings();
        train(&mut model, &data, &s1, None).unwrap();
        let before: Vec<(String, Vec<f64>)> = model
            .store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.tensor.data().to_vec()))
            .collect();
        let s2 = TrainSettings { stage: 2, epochs: 2, ..smoke_settings() };
        let out = train(&mut model, &data, &s2, None).unwrap();
        assert!(out.aborted.is_none());
        let mut heads_changed = false;
        for ((name, old), (_, p)) in before.iter().zip(model.store.iter()) {
            let is_head = name.starts_with("head.") || name.starts_with("readout.aux.");
            if is_head {
                heads_changed |= old != p.tensor.data();
            } else {
                assert_eq!(old, p.tensor.data(), "backbone parameter {name} moved");
            }
        }
        assert!(heads_changed, "stage 2 must move some head parameter");
        // Auxiliary-head loss decreases over stage 2.
        let first = &out.history.first().unwrap();
        let last = &out.history.last().unwrap();
        assert!(last.bce_m < first.bce_m, "{} -> {}", first.bce_m, last.bce_m);
    }

    #[test]
    fn stage_two_sends_zero_gradient_to_frozen_parameters() {
        let gen = tiny_gen();
        let data = generate_split(&gen, "train", 2).unwrap();
        let mut model = tiny_train_model(&gen, 6);
        model.set_stage(2);
        let rec = &data.records[0];
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let pairs = build_pairs(&rec.ann.labels, 2, &mut rng).unwrap().pairs;
        let mut tape = Tape64::new();
        let (out, binds) = model
            .forward(&mut tape, &rec.seq, &pairs[0].sap, &pairs[0].uap, true, None)
            .unwrap();
        let loss = sample_objective(
            &mut tape,
            &out,
            &pairs[0],
            &rec.ann.labels,
            &rec.seq.node_mask,
            model.cfg.dim,
            &LossWeights::default(),
            ObjectiveMode::Stage2,
        )
        .unwrap();
        let grads = tape.backward(loss.total).unwrap();
        for (pid, p) in model.store.iter() {
            let got = grads.get(binds.id(pid));
            if p.trainable {
                assert!(got.is_some(), "trainable {} received no gradient", p.name);
            } else {
                assert!(got.is_none(), "frozen {} received a gradient", p.name);
            }
        }
    }

    #[test]
    fn stage_two_runs_on_an_untrained_model() {
        let gen = tiny_gen();
        let data = generate_split(&gen, "train", 3).unwrap();
        let mut model = tiny_train_model(&gen, 7);
        let s2 = TrainSettings { stage: 2, ..smoke_settings() };
        let out = train(&mut model, &data, &s2, None).unwrap();
        assert!(out.aborted.is_none());
        assert_eq!(out.epochs_run, 1);
    }

    #[test]
    fn head_reinit_flag_resets_heads() {
        let gen = tiny_gen();
        let data = generate_split(&gen, "train", 3).unwrap();
        let mut model = tiny_train_model(&gen, 8);
        train(&mut model, &data, &smoke_settings(), None).unwrap();
        let trained_head = model
            .store
            .get(model.store.lookup("head.t.w").unwrap())
            .tensor
            .data()
            .to_vec();
        let s2 = TrainSettings { stage: 2, epochs: 0, reinit_heads: true, ..smoke_settings() };
        train(&mut model, &data, &s2, None).unwrap();
        let reset_head = model
            .store
            .get(model.store.lookup("head.t.w").unwrap())
            .tensor
            .data()
            .to_vec();
        assert_ne!(trained_head, reset_head);
    }

    #[test]
    fn divergence_aborts_and_rolls_back() {
        let gen = tiny_gen();
        let data = generate_split(&gen, "train", 6).unwrap();
        let mut model = tiny_train_model(&gen, 9);
        let dir = tempfile::tempdir().unwrap();
        // One sane epoch, then an explosive learning rate.
        train(&mut model, &data, &smoke_settings(), Some(dir.path())).unwrap();
        let good: Vec<Vec<f64>> =
            model.store.iter().map(|(_, p)| p.tensor.data().to_vec()).collect();
        let wild = TrainSettings { epochs: 3, lr: 1e200, ..smoke_settings() };
        let out = train(&mut model, &data, &wild, Some(dir.path())).unwrap();
        assert!(out.aborted.is_some(), "1e200 learning rate must diverge");
        // Rolled-back parameters are finite and loadable.
        for (_, p) in model.store.iter() {
            assert!(p.tensor.data().iter().all(|v| v.is_finite()), "{}", p.name);
        }
        let (loaded, _, _) = load_checkpoint(&dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(loaded.store.len(), model.store.len());
        drop(good);
    }

    #[test]
    fn mu_g_moves_in_stage_one_and_freezes_in_stage_two() {
        let gen = tiny_gen();
        let data = generate_split(&gen, "train", 4).unwrap();
        let mut model = tiny_train_model(&gen, 10);
        assert!(model.mu_g(0).iter().all(|&v| v == 0.0));
        train(&mut model, &data, &smoke_settings(), None).unwrap();
        let after_s1 = model.mu_g(0);
        assert!(after_s1.iter().any(|&v| v != 0.0), "stage 1 must move mu_g");
        let s2 = TrainSettings { stage: 2, ..smoke_settings() };
        train(&mut model, &data, &s2, None).unwrap();
        assert_eq!(model.mu_g(0), after_s1, "stage 2 must not move mu_g");
    }

    #[test]
    fn per_video_sample_count_is_2l_plus_1() {
        let gen = tiny_gen();
        let data = generate_split(&gen, "train", 8).unwrap();
        for (v, rec) in data.records.iter().enumerate() {
            let l = rec.ann.labels.iter().filter(|&&x| x == 1).count();
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(5, &[NS_PAIRS, 0, v as u64]));
            let pairs = build_pairs(&rec.ann.labels, 2, &mut rng).unwrap().pairs;
            assert_eq!(pairs.len(), 2 * l + 1);
        }
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let report = run_gradcheck(11, 1e-5, 1e-5).unwrap();
        assert!(report.pass, "{report}");
        assert!(report.checked > 500, "checked only {} partials", report.checked);
        // Stay clear of the tolerance: a pass that rides the boundary
        // would flap under unrelated computation-order changes.
        assert!(report.max_rel_err < 5e-6, "thin margin: {report}");
    }
}
