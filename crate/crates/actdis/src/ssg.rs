//! Data model and serialization for spatio-temporal scene-graph sequences.
//!
//! A video is `N` frames, each with up to `M` node slots. Slots carry an
//! object-class id and a mask flag; a masked slot has class 0 and no
//! relations. Relations are typed directed edges between two distinct slots
//! of one frame; an ordered pair may carry several relation types at once.
//!
//! Records travel as line-delimited JSON with self-describing keys, one video
//! per line. Errors from validation and parsing name the offending field path
//! (and line number when reading a file), so corrupt datasets are debuggable.

use gradtape::Tensor64;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SsgError {
    #[error("{field}: {msg}")]
    Invalid { field: String, msg: String },
    #[error("line {line}: {msg}")]
    AtLine { line: usize, msg: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn invalid(field: impl Into<String>, msg: impl Into<String>) -> SsgError {
    SsgError::Invalid { field: field.into(), msg: msg.into() }
}

/// Vocabulary sizes a dataset is validated against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub object_classes: u32,
    pub relation_types: u32,
    pub action_classes: usize,
}

/// One typed directed edge inside one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Relation {
    pub frame: usize,
    pub src: usize,
    pub dst: usize,
    pub rel: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneGraphSequence {
    pub video_id: String,
    pub num_frames: usize,
    pub max_nodes: usize,
    /// Row-major `N x M`; 0 doubles as the padding class for masked slots.
    pub node_class: Vec<u32>,
    /// Row-major `N x M`.
    pub node_mask: Vec<bool>,
    pub relations: Vec<Relation>,
}

impl SceneGraphSequence {
    pub fn class_at(&self, frame: usize, node: usize) -> u32 {
        self.node_class[frame * self.max_nodes + node]
    }

    pub fn mask_at(&self, frame: usize, node: usize) -> bool {
        self.node_mask[frame * self.max_nodes + node]
    }

    /// Sort relations into the canonical (frame, src, dst, rel) order.
    pub fn canonicalize(&mut self) {
        self.relations.sort();
    }

    /// Distinct ordered node pairs that carry at least one relation in any
    /// frame, in sorted order. This is the sparse support the edge stream
    /// operates on; pairs never related anywhere contribute nothing.
    pub fn active_pairs(&self) -> Vec<(usize, usize)> {
        let set: BTreeSet<(usize, usize)> =
            self.relations.iter().map(|r| (r.src, r.dst)).collect();
        set.into_iter().collect()
    }
}

/// Inclusive frame interval `[start, end]` during which `class` is performed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActionSegment {
    pub class: usize,
    pub start: usize,
    pub end: usize,
}

impl ActionSegment {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false // inclusive intervals always cover at least one frame
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoAnnotation {
    /// Multi-hot over the C action classes.
    pub labels: Vec<u8>,
    pub segments: Vec<ActionSegment>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoRecord {
    pub seq: SceneGraphSequence,
    pub ann: VideoAnnotation,
}

/// Node features produced by embedding lookups: masked slots are exactly zero.
#[derive(Debug, Clone)]
pub struct NodeFeatures {
    /// `[N, M, D]`.
    pub values: Tensor64,
    /// Row-major `N x M`, copied from the sequence.
    pub mask: Vec<bool>,
}

// ── validation ──────────────────────────────────────────────────────────

pub fn validate(record: &VideoRecord, vocab: &Vocab) -> Result<(), SsgError> {
    let seq = &record.seq;
    let (n, m) = (seq.num_frames, seq.max_nodes);
    if n == 0 || m == 0 {
        return Err(invalid("N", "frame and node counts must be positive"));
    }
    if seq.node_class.len() != n * m {
        return Err(invalid("node_class", format!("expected {}x{} entries, got {}", n, m, seq.node_class.len())));
    }
    if seq.node_mask.len() != n * m {
        return Err(invalid("node_mask", format!("expected {}x{} entries, got {}", n, m, seq.node_mask.len())));
    }
    for i in 0..n {
        let mut any = false;
        for j in 0..m {
            let cell = format!("node_class[{}][{}]", i, j);
            let (cls, msk) = (seq.class_at(i, j), seq.mask_at(i, j));
            if !msk && cls != 0 {
                return Err(invalid(cell, "masked slot must carry the padding class 0"));
            }
            if msk && cls >= vocab.object_classes {
                return Err(invalid(cell, format!("class {} outside object vocabulary {}", cls, vocab.object_classes)));
            }
            any |= msk;
        }
        if !any {
            return Err(invalid(format!("node_mask[{}]", i), "every frame needs at least one unmasked node"));
        }
    }
    let mut seen = BTreeSet::new();
    for (idx, r) in seq.relations.iter().enumerate() {
        let field = format!("relations[{}]", idx);
        if r.frame >= n {
            return Err(invalid(field, format!("frame {} out of range {}", r.frame, n)));
        }
        if r.src >= m || r.dst >= m {
            return Err(invalid(field, format!("node index out of range {}", m)));
        }
        if r.src == r.dst {
            return Err(invalid(field, "self-relations are not allowed"));
        }
        if r.rel >= vocab.relation_types {
            return Err(invalid(field, format!("relation type {} outside vocabulary {}", r.rel, vocab.relation_types)));
        }
        if !seq.mask_at(r.frame, r.src) || !seq.mask_at(r.frame, r.dst) {
            return Err(invalid(field, "relation touches a masked slot"));
        }
        if !seen.insert(*r) {
            return Err(invalid(field, "duplicate relation"));
        }
    }
    let ann = &record.ann;
    if ann.labels.len() != vocab.action_classes {
        return Err(invalid("labels", format!("expected {} entries, got {}", vocab.action_classes, ann.labels.len())));
    }
    if let Some(pos) = ann.labels.iter().position(|&v| v > 1) {
        return Err(invalid(format!("labels[{}]", pos), "labels are multi-hot 0/1"));
    }
    for (idx, s) in ann.segments.iter().enumerate() {
        let field = format!("segments[{}]", idx);
        if s.class >= vocab.action_classes {
            return Err(invalid(field, format!("class {} out of range {}", s.class, vocab.action_classes)));
        }
        if ann.labels[s.class] != 1 {
            return Err(invalid(field, "segment for a class whose label is 0"));
        }
        if s.start > s.end || s.end >= n {
            return Err(invalid(field, format!("interval [{}, {}] invalid for {} frames", s.start, s.end, n)));
        }
    }
    Ok(())
}

// ── embedding ───────────────────────────────────────────────────────────

/// Look up one embedding row per unmasked node; masked slots stay zero.
pub fn embed_nodes(seq: &SceneGraphSequence, table: &Tensor64) -> Result<NodeFeatures, SsgError> {
    let shape = table.shape();
    if shape.len() != 2 {
        return Err(invalid("embedding_table", format!("expected rank 2, got {:?}", shape)));
    }
    let (vocab, d) = (shape[0], shape[1]);
    let (n, m) = (seq.num_frames, seq.max_nodes);
    let mut values = vec![0.0; n * m * d];
    for i in 0..n {
        for j in 0..m {
            if !seq.mask_at(i, j) {
                continue;
            }
            let cls = seq.class_at(i, j) as usize;
            if cls >= vocab {
                return Err(invalid(
                    format!("node_class[{}][{}]", i, j),
                    format!("class {} outside embedding table of {} rows", cls, vocab),
                ));
            }
            let dst = (i * m + j) * d;
            for k in 0..d {
                values[dst + k] = table.data()[cls * d + k];
            }
        }
    }
    Ok(NodeFeatures {
        values: Tensor64::from_vec(vec![n, m, d], values).expect("embed shape"),
        mask: seq.node_mask.clone(),
    })
}

// ── wire format ─────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct WireRecord {
    video_id: String,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "M")]
    m: usize,
    node_class: Vec<Vec<u32>>,
    node_mask: Vec<Vec<bool>>,
    /// `[frame, src, dst, type]` quadruples.
    relations: Vec<(usize, usize, usize, u32)>,
    labels: Vec<u8>,
    /// `[class, start, end]` triples, inclusive frame intervals.
    segments: Vec<(usize, usize, usize)>,
}

/// One line of JSON for a validated record.
pub fn serialize_record(record: &VideoRecord) -> String {
    let seq = &record.seq;
    let (n, m) = (seq.num_frames, seq.max_nodes);
    let wire = WireRecord {
        video_id: seq.video_id.clone(),
        n,
        m,
        node_class: (0..n).map(|i| seq.node_class[i * m..(i + 1) * m].to_vec()).collect(),
        node_mask: (0..n).map(|i| seq.node_mask[i * m..(i + 1) * m].to_vec()).collect(),
        relations: seq.relations.iter().map(|r| (r.frame, r.src, r.dst, r.rel)).collect(),
        labels: record.ann.labels.clone(),
        segments: record.ann.segments.iter().map(|s| (s.class, s.start, s.end)).collect(),
    };
    serde_json::to_string(&wire).expect("record serializes")
}

/// Parse and validate one line. `line_no` is 1-based and only used for error
/// reporting.
pub fn deserialize_record(line: &str, vocab: &Vocab, line_no: usize) -> Result<VideoRecord, SsgError> {
    let at_line = |msg: String| SsgError::AtLine { line: line_no, msg };
    let wire: WireRecord = serde_json::from_str(line).map_err(|e| at_line(format!("malformed record: {}", e)))?;
    if wire.node_class.len() != wire.n || wire.node_class.iter().any(|row| row.len() != wire.m) {
        return Err(at_line(format!("node_class: expected {} rows of {} entries", wire.n, wire.m)));
    }
    if wire.node_mask.len() != wire.n || wire.node_mask.iter().any(|row| row.len() != wire.m) {
        return Err(at_line(format!("node_mask: expected {} rows of {} entries", wire.n, wire.m)));
    }
    let record = VideoRecord {
        seq: SceneGraphSequence {
            video_id: wire.video_id,
            num_frames: wire.n,
            max_nodes: wire.m,
            node_class: wire.node_class.into_iter().flatten().collect(),
            node_mask: wire.node_mask.into_iter().flatten().collect(),
            relations: wire
                .relations
                .into_iter()
                .map(|(frame, src, dst, rel)| Relation { frame, src, dst, rel })
                .collect(),
        },
        ann: VideoAnnotation {
            labels: wire.labels,
            segments: wire
                .segments
                .into_iter()
                .map(|(class, start, end)| ActionSegment { class, start, end })
                .collect(),
        },
    };
    validate(&record, vocab).map_err(|e| at_line(e.to_string()))?;
    Ok(record)
}

// ── dataset files ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<VideoRecord>,
}

impl Dataset {
    pub fn load(path: &Path, vocab: &Vocab) -> Result<Self, SsgError> {
        let file = fs::File::open(path)
            .map_err(|e| SsgError::Io { path: path.display().to_string(), source: e })?;
        let mut records = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| SsgError::Io { path: path.display().to_string(), source: e })?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(deserialize_record(&line, vocab, idx + 1)?);
        }
        Ok(Dataset { records })
    }

    pub fn save(&self, path: &Path) -> Result<(), SsgError> {
        let io = |e: std::io::Error| SsgError::Io { path: path.display().to_string(), source: e };
        let mut out = fs::File::create(path).map_err(io)?;
        for record in &self.records {
            out.write_all(serialize_record(record).as_bytes()).map_err(io)?;
            out.write_all(b"\n").map_err(io)?;
        }
        out.flush().map_err(io)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}
