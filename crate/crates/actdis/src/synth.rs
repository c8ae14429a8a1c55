//! Synthetic scene-graph videos with planted action motifs.
//!
//! Every action class c has a fixed motif: a (subject-class, object-class)
//! pair plus an "active" relation type unique to c. A video samples L
//! distinct actions; each occupies two dedicated node slots for the whole
//! video and carries the active relation on its (subject -> object) pair
//! during one contiguous segment, and the shared idle relation outside it.
//! Left-over slots become distractor nodes that sprinkle idle relations
//! around. Actions are therefore detectable from relations alone — node
//! classes repeat across motifs — which forces a model to use the edge and
//! message pathways.
//!
//! Relation noise flips emitted relation types after the ground truth is
//! recorded. At noise 0 the rule-based [`decode`] oracle recovers labels and
//! segments exactly; that property is the dataset's solvability guarantee.

use crate::ssg::{
    ActionSegment, Dataset, Relation, SceneGraphSequence, SsgError, Vocab, VideoAnnotation,
    VideoRecord,
};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;
use std::collections::BTreeSet;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid generator config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Ssg(#[from] SsgError),
}

/// One planted action pattern.
#[derive(Debug, Clone, Copy)]
pub struct ActionMotif {
    pub action: usize,
    pub subject: u32,
    pub object: u32,
    pub active_rel: u32,
    pub idle_rel: u32,
    pub min_duration: usize,
    pub max_duration: usize,
}

#[derive(Debug, Clone)]
pub struct GenConfig {
    /// Number of action classes C (one motif each).
    pub actions: usize,
    /// Frames per video N.
    pub frames: usize,
    /// Node slots per frame M.
    pub max_nodes: usize,
    /// Object vocabulary size (class 0 is reserved for padding).
    pub object_vocab: u32,
    /// Actions per video are drawn uniformly from [1, l_max].
    pub l_max: usize,
    /// Motif segment length bounds (inclusive, clamped to N).
    pub min_duration: usize,
    pub max_duration: usize,
    /// Probability that an emitted relation's type is flipped.
    pub relation_noise: f64,
    /// Train-time feature jitter recorded alongside the data config; the
    /// generator itself emits discrete graphs and does not use it.
    pub feature_noise: f64,
    pub seed: u64,
}

impl GenConfig {
    /// Vocabulary implied by the motif table: C active types + 1 idle type.
    pub fn vocab(&self) -> Vocab {
        Vocab {
            object_classes: self.object_vocab,
            relation_types: self.actions as u32 + 1,
            action_classes: self.actions,
        }
    }

    pub fn validate(&self) -> Result<(), GenError> {
        if self.actions == 0 || self.frames == 0 || self.max_nodes == 0 {
            return Err(GenError::Invalid("actions, frames, and nodes must be positive".into()));
        }
        if self.l_max == 0 || self.l_max > self.actions {
            return Err(GenError::Invalid(format!(
                "l_max {} must lie in [1, {}]",
                self.l_max, self.actions
            )));
        }
        if 2 * self.l_max > self.max_nodes {
            return Err(GenError::Invalid(format!(
                "{} node slots cannot host {} concurrent motifs (2 slots each)",
                self.max_nodes, self.l_max
            )));
        }
        if self.object_vocab < 3 {
            return Err(GenError::Invalid("object vocabulary needs >= 2 usable classes".into()));
        }
        if self.min_duration == 0 || self.min_duration > self.max_duration {
            return Err(GenError::Invalid("need 1 <= min_duration <= max_duration".into()));
        }
        if !(0.0..=1.0).contains(&self.relation_noise) {
            return Err(GenError::Invalid("relation_noise must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// The fixed motif table. Object classes cycle through the usable
    /// vocabulary so different actions share node classes.
    pub fn motifs(&self) -> Vec<ActionMotif> {
        let usable = (self.object_vocab - 1) as usize;
        (0..self.actions)
            .map(|c| ActionMotif {
                action: c,
                subject: 1 + ((2 * c) % usable) as u32,
                object: 1 + ((2 * c + 1) % usable) as u32,
                active_rel: c as u32,
                idle_rel: self.actions as u32,
                min_duration: self.min_duration.min(self.frames),
                max_duration: self.max_duration.min(self.frames),
            })
            .collect()
    }
}

/// Mix a base seed with stream labels into an independent substream seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = base ^ 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        // splitmix64 finalizer
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

pub fn generate_video(
    cfg: &GenConfig,
    video_id: &str,
    rng: &mut ChaCha12Rng,
) -> Result<VideoRecord, GenError> {
    cfg.validate()?;
    let motifs = cfg.motifs();
    let (n, m, c) = (cfg.frames, cfg.max_nodes, cfg.actions);

    // Pick L distinct actions.
    let l = rng.gen_range(1..=cfg.l_max);
    let mut order: Vec<usize> = (0..c).collect();
    for i in 0..l {
        let j = rng.gen_range(i..c);
        order.swap(i, j);
    }
    let chosen = &order[..l];
    if 2 * l > m {
        return Err(GenError::Invalid(format!("{} slots cannot host {} actions", m, l)));
    }

    let mut node_class = vec![0u32; n * m];
    let mut node_mask = vec![false; n * m];
    let mut relations: Vec<Relation> = Vec::new();
    let mut labels = vec![0u8; c];
    let mut segments = Vec::new();

    // Motif slots: action a uses slots (2a, 2a+1) for subject and object.
    for (a, &action) in chosen.iter().enumerate() {
        let motif = motifs[action];
        let (subj, obj) = (2 * a, 2 * a + 1);
        let dur = rng.gen_range(motif.min_duration..=motif.max_duration);
        let start = rng.gen_range(0..=n - dur);
        let end = start + dur - 1;
        labels[action] = 1;
        segments.push(ActionSegment { class: action, start, end });
        for i in 0..n {
            node_class[i * m + subj] = motif.subject;
            node_class[i * m + obj] = motif.object;
            node_mask[i * m + subj] = true;
            node_mask[i * m + obj] = true;
            let rel = if i >= start && i <= end { motif.active_rel } else { motif.idle_rel };
            relations.push(Relation { frame: i, src: subj, dst: obj, rel });
        }
    }

    // Distractor nodes in the remaining slots: random classes, idle edges.
    let usable = cfg.object_vocab - 1;
    let idle = c as u32;
    for d in 2 * l..m {
        let class = 1 + rng.gen_range(0..usable);
        for i in 0..n {
            node_class[i * m + d] = class;
            node_mask[i * m + d] = true;
        }
    }
    let mut edge_set: BTreeSet<(usize, usize, usize)> =
        relations.iter().map(|r| (r.frame, r.src, r.dst)).collect();
    for d in 2 * l..m {
        for i in 0..n {
            if rng.gen_bool(0.5) {
                // Pick any other unmasked slot and a random direction.
                let mut other = rng.gen_range(0..m - 1);
                if other >= d {
                    other += 1;
                }
                let (src, dst) = if rng.gen_bool(0.5) { (d, other) } else { (other, d) };
                if edge_set.insert((i, src, dst)) {
                    relations.push(Relation { frame: i, src, dst, rel: idle });
                }
            }
        }
    }

    // Relation noise: flip a type to a different uniformly chosen one. Ground
    // truth above is already recorded, so noise only perturbs observations.
    let num_types = c as u32 + 1;
    if cfg.relation_noise > 0.0 {
        for r in relations.iter_mut() {
            if rng.gen_bool(cfg.relation_noise) {
                let shift = rng.gen_range(1..num_types);
                r.rel = (r.rel + shift) % num_types;
            }
        }
    }

    let mut seq = SceneGraphSequence {
        video_id: video_id.to_string(),
        num_frames: n,
        max_nodes: m,
        node_class,
        node_mask,
        relations,
    };
    seq.canonicalize();
    let record = VideoRecord { seq, ann: VideoAnnotation { labels, segments } };
    crate::ssg::validate(&record, &cfg.vocab())?;
    Ok(record)
}

/// Rule-based solvability oracle: recover labels and segments by scanning
/// for maximal per-pair runs of each motif's active relation type. Exact at
/// relation-noise 0.
pub fn decode(seq: &SceneGraphSequence, actions: usize) -> (Vec<u8>, Vec<ActionSegment>) {
    let mut labels = vec![0u8; actions];
    let mut segments = Vec::new();
    for action in 0..actions {
        let rel = action as u32;
        let pairs: BTreeSet<(usize, usize)> = seq
            .relations
            .iter()
            .filter(|r| r.rel == rel)
            .map(|r| (r.src, r.dst))
            .collect();
        for (src, dst) in pairs {
            let mut frames: Vec<usize> = seq
                .relations
                .iter()
                .filter(|r| r.rel == rel && r.src == src && r.dst == dst)
                .map(|r| r.frame)
                .collect();
            frames.sort_unstable();
            frames.dedup();
            let mut run_start = None;
            let mut prev = 0usize;
            for &f in &frames {
                match run_start {
                    None => {
                        run_start = Some(f);
                    }
                    Some(_) if f == prev + 1 => {}
                    Some(s) => {
                        labels[action] = 1;
                        segments.push(ActionSegment { class: action, start: s, end: prev });
                        run_start = Some(f);
                    }
                }
                prev = f;
            }
            if let Some(s) = run_start {
                labels[action] = 1;
                segments.push(ActionSegment { class: action, start: s, end: prev });
            }
        }
    }
    segments.sort_by_key(|s| (s.class, s.start));
    (labels, segments)
}

/// Per-class positive counts, for balance checks and logging.
pub fn class_counts(dataset: &Dataset, actions: usize) -> Vec<usize> {
    let mut counts = vec![0usize; actions];
    for rec in &dataset.records {
        for (c, &v) in rec.ann.labels.iter().enumerate() {
            if v == 1 {
                counts[c] += 1;
            }
        }
    }
    counts
}

/// Generate a split deterministically: video k uses an independent substream
/// derived from (seed, split tag, k).
pub fn generate_split(cfg: &GenConfig, tag: &str, count: usize) -> Result<Dataset, GenError> {
    let tag_code = tag.bytes().fold(0u64, |acc, b| acc.wrapping_mul(257).wrapping_add(b as u64));
    let mut records = Vec::with_capacity(count);
    for k in 0..count {
        let seed = derive_seed(cfg.seed, &[tag_code, k as u64]);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let id = format!("{}-{:06}", tag, k);
        records.push(generate_video(cfg, &id, &mut rng)?);
    }
    Ok(Dataset { records })
}

/// Write train and val files; returns the two datasets for inspection.
pub fn generate_dataset(
    cfg: &GenConfig,
    n_train: usize,
    n_val: usize,
    train_path: &Path,
    val_path: &Path,
) -> Result<(Dataset, Dataset), GenError> {
    cfg.validate()?;
    let train = generate_split(cfg, "train", n_train)?;
    let val = generate_split(cfg, "val", n_val)?;
    train.save(train_path)?;
    val.save(val_path)?;
    Ok((train, val))
}
