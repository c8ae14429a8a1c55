//! Run configuration: one flat `key = value` text format covering data
//! generation, the model, training, and evaluation, with defaults sized for
//! the synthetic end-to-end run. Every command writes the canonical echo of
//! its effective configuration next to its outputs.

use crate::dpm::WeightActivation;
use crate::model::ModelConfig;
use crate::objective::LossWeights;
use crate::ssg::Vocab;
use crate::synth::GenConfig;
use crate::train::TrainSettings;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Malformed { line: usize, text: String },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: `{value}` is not a valid {expected}")]
    BadValue { key: String, value: String, expected: &'static str },
    #[error("{0}")]
    Invalid(String),
}

/// The full run configuration. Field names double as the configuration-file
/// keys.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    // data generation
    pub actions: usize,
    pub frames: usize,
    pub max_nodes: usize,
    pub object_vocab: u32,
    pub l_max: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub relation_noise: f64,
    pub feature_noise: f64,
    pub train_videos: usize,
    pub val_videos: usize,
    // model
    pub dim: usize,
    pub hidden: usize,
    pub prompts: usize,
    pub layers: usize,
    pub momentum: f64,
    pub eps: f64,
    pub weight_activation: WeightActivation,
    pub simple_prompt: bool,
    // training
    pub k: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub reinit_heads: bool,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub m1: f64,
    pub m2: f64,
    // evaluation
    pub trials: usize,
    pub theta: f64,
    pub iou: f64,
    pub per_frame: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            actions: 6,
            frames: 8,
            max_nodes: 6,
            object_vocab: 8,
            l_max: 3,
            min_duration: 3,
            max_duration: 6,
            relation_noise: 0.05,
            feature_noise: 0.05,
            train_videos: 600,
            val_videos: 200,
            dim: 32,
            hidden: 32,
            prompts: 8,
            layers: 2,
            momentum: 0.9,
            eps: 1e-5,
            weight_activation: WeightActivation::Softmax,
            simple_prompt: false,
            k: 3,
            stage1_epochs: 12,
            stage2_epochs: 4,
            batch_size: 8,
            lr: 1e-3,
            reinit_heads: false,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 0.5,
            m1: 0.1,
            m2: 0.01,
            trials: 5,
            theta: 0.7,
            iou: 0.5,
            per_frame: false,
        }
    }
}

fn parse<T: std::str::FromStr>(
    key: &str,
    value: &str,
    expected: &'static str,
) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        expected,
    })
}

impl RunConfig {
    /// Apply one `key = value` assignment.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "seed" => self.seed = parse(key, value, "unsigned integer")?,
            "actions" => self.actions = parse(key, value, "unsigned integer")?,
            "frames" => self.frames = parse(key, value, "unsigned integer")?,
            "max_nodes" => self.max_nodes = parse(key, value, "unsigned integer")?,
            "object_vocab" => self.object_vocab = parse(key, value, "unsigned integer")?,
            "l_max" => self.l_max = parse(key, value, "unsigned integer")?,
            "min_duration" => self.min_duration = parse(key, value, "unsigned integer")?,
            "max_duration" => self.max_duration = parse(key, value, "unsigned integer")?,
            "relation_noise" => self.relation_noise = parse(key, value, "number")?,
            "feature_noise" => self.feature_noise = parse(key, value, "number")?,
            "train_videos" => self.train_videos = parse(key, value, "unsigned integer")?,
            "val_videos" => self.val_videos = parse(key, value, "unsigned integer")?,
            "dim" => self.dim = parse(key, value, "unsigned integer")?,
            "hidden" => self.hidden = parse(key, value, "unsigned integer")?,
            "prompts" => self.prompts = parse(key, value, "unsigned integer")?,
            "layers" => self.layers = parse(key, value, "unsigned integer")?,
            "momentum" => self.momentum = parse(key, value, "number")?,
            "eps" => self.eps = parse(key, value, "number")?,
            "weight_activation" => {
                self.weight_activation = match value {
                    "softmax" => WeightActivation::Softmax,
                    "sigmoid" => WeightActivation::Sigmoid,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.to_string(),
                            value: value.to_string(),
                            expected: "`softmax` or `sigmoid`",
                        })
                    }
                }
            }
            "simple_prompt" => self.simple_prompt = parse(key, value, "boolean")?,
            "k" => self.k = parse(key, value, "unsigned integer")?,
            "stage1_epochs" => self.stage1_epochs = parse(key, value, "unsigned integer")?,
            "stage2_epochs" => self.stage2_epochs = parse(key, value, "unsigned integer")?,
            "batch_size" => self.batch_size = parse(key, value, "unsigned integer")?,
            "lr" => self.lr = parse(key, value, "number")?,
            "reinit_heads" => self.reinit_heads = parse(key, value, "boolean")?,
            "lambda1" => self.lambda1 = parse(key, value, "number")?,
            "lambda2" => self.lambda2 = parse(key, value, "number")?,
            "lambda3" => self.lambda3 = parse(key, value, "number")?,
            "lambda4" => self.lambda4 = parse(key, value, "number")?,
            "m1" => self.m1 = parse(key, value, "number")?,
            "m2" => self.m2 = parse(key, value, "number")?,
            "trials" => self.trials = parse(key, value, "unsigned integer")?,
            "theta" => self.theta = parse(key, value, "number")?,
            "iou" => self.iou = parse(key, value, "number")?,
            "per_frame" => self.per_frame = parse(key, value, "boolean")?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Parse a configuration file: `key = value` per line, `#` comments and
    /// blank lines ignored, later assignments override earlier ones.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Malformed {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), source: e })?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        if self.actions == 0 || self.frames == 0 || self.max_nodes < 2 {
            return fail("need actions ≥ 1, frames ≥ 1, max_nodes ≥ 2".into());
        }
        if self.object_vocab < 2 {
            return fail("object_vocab must include padding plus one class".into());
        }
        if self.l_max == 0 || self.l_max > self.actions {
            return fail(format!("l_max = {} outside [1, actions = {}]", self.l_max, self.actions));
        }
        if self.k < self.l_max || self.k + self.l_max > self.actions {
            return fail(format!(
                "k = {} outside [l_max = {}, actions − l_max = {}]: a full specification \
                 needs k slots among which up to l_max are present and the rest absent",
                self.k,
                self.l_max,
                self.actions as i64 - self.l_max as i64
            ));
        }
        if self.min_duration == 0
            || self.min_duration > self.max_duration
            || self.max_duration > self.frames
        {
            return fail(format!(
                "durations [{}, {}] must be ordered and fit in {} frames",
                self.min_duration, self.max_duration, self.frames
            ));
        }
        for (name, v) in [
            ("relation_noise", self.relation_noise),
            ("feature_noise", self.feature_noise),
            ("theta", self.theta),
            ("iou", self.iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum = {} outside [0, 1)", self.momentum));
        }
        if self.eps <= 0.0 || self.lr <= 0.0 {
            return fail("eps and lr must be positive".into());
        }
        if self.dim == 0 || self.hidden == 0 || self.prompts == 0 || self.layers == 0 {
            return fail("dim, hidden, prompts, and layers must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
            ("m1", self.m1),
            ("m2", self.m2),
        ] {
            if !v.is_finite() || v < 0.0 {
                return fail(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        if self.trials == 0 {
            return fail("trials must be positive".into());
        }
        Ok(())
    }

    /// Canonical echo: every key in fixed order, one per line. Parsing the
    /// echo reproduces the configuration exactly.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("actions", self.actions.to_string());
        kv("frames", self.frames.to_string());
        kv("max_nodes", self.max_nodes.to_string());
        kv("object_vocab", self.object_vocab.to_string());
        kv("l_max", self.l_max.to_string());
        kv("min_duration", self.min_duration.to_string());
        kv("max_duration", self.max_duration.to_string());
        kv("relation_noise", self.relation_noise.to_string());
        kv("feature_noise", self.feature_noise.to_string());
        kv("train_videos", self.train_videos.to_string());
        kv("val_videos", self.val_videos.to_string());
        kv("dim", self.dim.to_string());
        kv("hidden", self.hidden.to_string());
        kv("prompts", self.prompts.to_string());
        kv("layers", self.layers.to_string());
        kv("momentum", self.momentum.to_string());
        kv("eps", self.eps.to_string());
        kv(
            "weight_activation",
            match self.weight_activation {
                WeightActivation::Softmax => "softmax".to_string(),
                WeightActivation::Sigmoid => "sigmoid".to_string(),
            },
        );
        kv("simple_prompt", self.simple_prompt.to_string());
        kv("k", self.k.to_string());
        kv("stage1_epochs", self.stage1_epochs.to_string());
        kv("stage2_epochs", self.stage2_epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", self.lr.to_string());
        kv("reinit_heads", self.reinit_heads.to_string());
        kv("lambda1", self.lambda1.to_string());
        kv("lambda2", self.lambda2.to_string());
        kv("lambda3", self.lambda3.to_string());
        kv("lambda4", self.lambda4.to_string());
        kv("m1", self.m1.to_string());
        kv("m2", self.m2.to_string());
        kv("trials", self.trials.to_string());
        kv("theta", self.theta.to_string());
        kv("iou", self.iou.to_string());
        kv("per_frame", self.per_frame.to_string());
        s
    }

    // ── derived per-module configurations ───────────────────────────────

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            actions: self.actions,
            frames: self.frames,
            max_nodes: self.max_nodes,
            object_vocab: self.object_vocab,
            l_max: self.l_max,
            min_duration: self.min_duration,
            max_duration: self.max_duration,
            relation_noise: self.relation_noise,
            feature_noise: self.feature_noise,
            seed: self.seed,
        }
    }

    pub fn vocab(&self) -> Vocab {
        self.gen_config().vocab()
    }

    pub fn model_config(&self) -> ModelConfig {
        let vocab = self.vocab();
        ModelConfig {
            action_classes: self.actions,
            object_classes: vocab.object_classes as usize,
            relation_types: vocab.relation_types as usize,
            frames: self.frames,
            max_nodes: self.max_nodes,
            dim: self.dim,
            prompts: self.prompts,
            layers: self.layers,
            hidden: self.hidden,
            momentum: self.momentum,
            eps: self.eps,
            feature_noise: self.feature_noise,
            weight_activation: self.weight_activation,
            simple_prompt: self.simple_prompt,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
            lambda4: self.lambda4,
            m1: self.m1,
            m2: self.m2,
        }
    }

    pub fn train_settings(&self, stage: u8) -> TrainSettings {
        TrainSettings {
            stage,
            epochs: if stage == 1 { self.stage1_epochs } else { self.stage2_epochs },
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            k: self.k,
            weights: self.loss_weights(),
            reinit_heads: self.reinit_heads,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn echo_round_trips_exactly() {
        let mut cfg = RunConfig::default();
        cfg.apply("lr", "0.00314").unwrap();
        cfg.apply("weight_activation", "sigmoid").unwrap();
        cfg.apply("per_frame", "true").unwrap();
        cfg.apply("eps", "1e-7").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.echo()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn file_format_accepts_comments_and_blanks() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# a comment\n\nactions = 4   # trailing note\n  k=2 \nl_max = 2\n")
            .unwrap();
        assert_eq!(cfg.actions, 4);
        assert_eq!(cfg.k, 2);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_key_is_rejected() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply("not_a_key", "1").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(_)));
        let err = cfg.apply_text("frames = x\n").unwrap_err();
        assert!(matches!(err, ConfigError::BadValue { .. }));
        let err = cfg.apply_text("just words\n").unwrap_err();
        assert!(matches!(err, ConfigError::Malformed { line: 1, .. }));
    }

    #[test]
    fn validation_catches_infeasible_specification_size() {
        let mut cfg = RunConfig::default();
        cfg.apply("k", "5").unwrap(); // actions 6, l_max 3 → k must be 3
        assert!(cfg.validate().is_err());
        cfg.apply("k", "2").unwrap();
        assert!(cfg.validate().is_err());
        cfg.apply("k", "3").unwrap();
        cfg.validate().unwrap();
    }

    #[test]
    fn validation_catches_bad_durations_and_rates() {
        let mut cfg = RunConfig::default();
        cfg.apply("max_duration", "9").unwrap(); // frames = 8
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.apply("relation_noise", "1.5").unwrap();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.apply("momentum", "1.0").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn derived_configurations_agree_with_the_source() {
        let cfg = RunConfig::default();
        let gen = cfg.gen_config();
        let model = cfg.model_config();
        assert_eq!(model.relation_types, cfg.actions + 1);
        assert_eq!(model.object_classes, gen.object_vocab as usize);
        assert_eq!(model.frames, gen.frames);
        let s1 = cfg.train_settings(1);
        let s2 = cfg.train_settings(2);
        assert_eq!(s1.epochs, cfg.stage1_epochs);
        assert_eq!(s2.epochs, cfg.stage2_epochs);
        assert_eq!(s1.weights.lambda4, cfg.lambda4);
    }
}
