//! Evaluation: multi-label average precision, specification robustness
//! sweeps grouped by label count, and threshold-based temporal localization
//! scored by segment matching over an IoU grid.

use crate::actionspec::{build_pairs, SpecError};
use crate::model::Model;
use crate::ssg::Dataset;
use crate::synth::derive_seed;
use crate::train::padded_truth;
use gradtape::{Tape64, TapeError};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("{0}")]
    Invalid(String),
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ── average precision ───────────────────────────────────────────────────

/// Average precision of one ranking: descending score, ties broken by
/// original index, `AP = Σ precision-at-each-positive / n_positives`.
/// `None` when there is no positive target (AP undefined; callers skip and
/// log the class).
pub fn average_precision(scores: &[f64], targets: &[u8]) -> Result<Option<f64>, EvalError> {
    if scores.len() != targets.len() {
        return Err(EvalError::Invalid(format!(
            "{} scores vs {} targets",
            scores.len(),
            targets.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(EvalError::Invalid(format!("non-finite score {bad}")));
    }
    let n_pos = targets.iter().filter(|&&t| t == 1).count();
    if n_pos == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable sort by descending score keeps original order among ties.
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &idx) in order.iter().enumerate() {
        if targets[idx] == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(Some(sum / n_pos as f64))
}

/// Macro mAP over the classes that have at least one positive.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapSummary {
    pub map: f64,
    pub classes_scored: usize,
    pub classes_skipped: usize,
}

/// `scores[v][c]` against 0/1 `targets[v][c]`; positive-free classes are
/// excluded from the macro mean and counted in `classes_skipped`.
pub fn multilabel_map(scores: &[Vec<f64>], targets: &[Vec<u8>]) -> Result<MapSummary, EvalError> {
    if scores.len() != targets.len() || scores.is_empty() {
        return Err(EvalError::Invalid(format!(
            "{} score rows vs {} target rows",
            scores.len(),
            targets.len()
        )));
    }
    let c = scores[0].len();
    if scores.iter().any(|r| r.len() != c) || targets.iter().any(|r| r.len() != c) {
        return Err(EvalError::Invalid("ragged score/target matrix".into()));
    }
    let mut total = 0.0;
    let mut scored = 0usize;
    let mut skipped = 0usize;
    for class in 0..c {
        let col_scores: Vec<f64> = scores.iter().map(|r| r[class]).collect();
        let col_targets: Vec<u8> = targets.iter().map(|r| r[class]).collect();
        match average_precision(&col_scores, &col_targets)? {
            Some(ap) => {
                total += ap;
                scored += 1;
            }
            None => {
                log::debug!("class {class} has no positives; skipped from mAP");
                skipped += 1;
            }
        }
    }
    let map = if scored > 0 { total / scored as f64 } else { 0.0 };
    Ok(MapSummary { map, classes_scored: scored, classes_skipped: skipped })
}

// ── recognition protocol ────────────────────────────────────────────────

/// Video-level mAP of the fused, auxiliary, and specification heads under
/// the full-specification protocol: every class specified, so each head's
/// target is the video's padded truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecognitionEval {
    pub map_t: f64,
    pub map_m: f64,
    pub map_s: f64,
    pub classes_skipped: usize,
}

pub fn recognition_eval(model: &Model, data: &Dataset) -> Result<RecognitionEval, EvalError> {
    if data.is_empty() {
        return Err(EvalError::Invalid("empty evaluation dataset".into()));
    }
    let c = model.cfg.action_classes;
    let sap = vec![1u8; c];
    let uap = vec![0u8; c];
    let mut st = Vec::with_capacity(data.len());
    let mut sm = Vec::with_capacity(data.len());
    let mut ss = Vec::with_capacity(data.len());
    let mut targets = Vec::with_capacity(data.len());
    for rec in &data.records {
        let mut tape = Tape64::new();
        let (out, _) = model.forward(&mut tape, &rec.seq, &sap, &uap, true, None)?;
        let take = |id| -> Vec<f64> {
            tape.value(id).data().iter().map(|&z| sigmoid(z)).collect()
        };
        st.push(take(out.a_t));
        sm.push(take(out.a_m.expect("aux requested")));
        ss.push(take(out.a_s));
        targets.push(padded_truth(&rec.ann.labels));
    }
    let t = multilabel_map(&st, &targets)?;
    let m = multilabel_map(&sm, &targets)?;
    let s = multilabel_map(&ss, &targets)?;
    Ok(RecognitionEval {
        map_t: t.map,
        map_m: m.map,
        map_s: s.map,
        classes_skipped: t.classes_skipped,
    })
}

// ── specification robustness sweep ──────────────────────────────────────

/// One sweep row: specification-branch mAP (mean ± std over trials) for the
/// videos with a given ground-truth label count (`None` pools all videos).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub label_count: Option<usize>,
    pub injected: bool,
    pub videos: usize,
    pub trials: usize,
    pub mean_map: f64,
    pub std_map: f64,
}

/// For each trial, every video draws one specification of the chosen family
/// (plain: present labels only; injected: padded to `k` hot entries with
/// absent labels) and the specification head is scored against that pair's
/// intersection targets. Rows group videos by label count, plus one pooled
/// row; empty groups are omitted.
pub fn robustness_sweep(
    model: &Model,
    data: &Dataset,
    injected: bool,
    k: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<SweepRow>, EvalError> {
    if data.is_empty() || trials == 0 {
        return Err(EvalError::Invalid("robustness sweep needs videos and trials".into()));
    }
    let family = u64::from(injected);
    // per_trial[t][v] = (scores, targets)
    let mut per_trial: Vec<Vec<(Vec<f64>, Vec<u8>)>> = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut rows = Vec::with_capacity(data.len());
        for (v, rec) in data.records.iter().enumerate() {
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(
                seed,
                &[20 + family, t as u64, v as u64],
            ));
            let batch = build_pairs(&rec.ann.labels, k, &mut rng)?;
            let candidates: Vec<_> =
                batch.pairs.iter().filter(|p| p.distractor_injected == injected).collect();
            let pair = candidates[rng.gen_range(0..candidates.len())];
            let mut tape = Tape64::new();
            let (out, _) = model.forward(&mut tape, &rec.seq, &pair.sap, &pair.uap, false, None)?;
            let scores: Vec<f64> =
                tape.value(out.a_s).data().iter().map(|&z| sigmoid(z)).collect();
            rows.push((scores, pair.y_s.clone()));
        }
        per_trial.push(rows);
    }

    let label_count =
        |v: usize| data.records[v].ann.labels.iter().filter(|&&x| x == 1).count();
    let mut groups: Vec<Option<usize>> = data
        .records
        .iter()
        .enumerate()
        .map(|(v, _)| label_count(v))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .map(Some)
        .collect();
    groups.push(None);

    let mut rows = Vec::new();
    for group in groups {
        let members: Vec<usize> = (0..data.len())
            .filter(|&v| group.map_or(true, |l| label_count(v) == l))
            .collect();
        if members.is_empty() {
            continue;
        }
        let mut maps = Vec::with_capacity(trials);
        for rows_t in &per_trial {
            let scores: Vec<Vec<f64>> = members.iter().map(|&v| rows_t[v].0.clone()).collect();
            let targets: Vec<Vec<u8>> = members.iter().map(|&v| rows_t[v].1.clone()).collect();
            maps.push(multilabel_map(&scores, &targets)?.map);
        }
        let mean = maps.iter().sum::<f64>() / maps.len() as f64;
        let std = if maps.len() > 1 {
            (maps.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / (maps.len() - 1) as f64)
                .sqrt()
        } else {
            0.0
        };
        rows.push(SweepRow {
            label_count: group,
            injected,
            videos: members.len(),
            trials,
            mean_map: mean,
            std_map: std,
        });
    }
    Ok(rows)
}

// ── temporal localization ───────────────────────────────────────────────

/// One predicted segment: inclusive frame interval plus its score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

/// Maximal runs of frames with `s > theta`; each run is scored by its mean
/// weight.
pub fn localize(s: &[f64], theta: f64) -> Result<Vec<Segment>, EvalError> {
    if let Some(bad) = s.iter().find(|&&x| !(0.0..=1.0).contains(&x)) {
        return Err(EvalError::Invalid(format!("frame weight {bad} outside [0, 1]")));
    }
    let mut segments = Vec::new();
    let mut start: Option<usize> = None;
    for i in 0..=s.len() {
        let hot = i < s.len() && s[i] > theta;
        match (start, hot) {
            (None, true) => start = Some(i),
            (Some(b), false) => {
                let slice = &s[b..i];
                segments.push(Segment {
                    start: b,
                    end: i - 1,
                    score: slice.iter().sum::<f64>() / slice.len() as f64,
                });
                start = None;
            }
            _ => {}
        }
    }
    Ok(segments)
}

/// Min-max rescale each per-(video, class) frame-score row to span [0, 1]
/// before thresholding: the within-video score profile, not the absolute
/// sigmoid level, carries the localization signal. A constant row has no
/// within-video preference and collapses to zeros (no segments).
pub fn normalize_weights(weights: &[Vec<Vec<f64>>]) -> Vec<Vec<Vec<f64>>> {
    weights
        .iter()
        .map(|per_class| {
            per_class
                .iter()
                .map(|row| {
                    let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let span = hi - lo;
                    if span <= 1e-12 {
                        vec![0.0; row.len()]
                    } else {
                        row.iter().map(|&x| (x - lo) / span).collect()
                    }
                })
                .collect()
        })
        .collect()
}

/// IoU of two inclusive frame intervals as frame-set ratio.
pub fn interval_iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let inter_lo = a.0.max(b.0);
    let inter_hi = a.1.min(b.1);
    let inter = if inter_lo <= inter_hi { inter_hi - inter_lo + 1 } else { 0 };
    let len_a = a.1 - a.0 + 1;
    let len_b = b.1 - b.0 + 1;
    let union = len_a + len_b - inter;
    inter as f64 / union as f64
}

/// A predicted segment attributed to one (video, class).
#[derive(Debug, Clone, Copy)]
pub struct PredSegment {
    pub video: usize,
    pub class: usize,
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

/// A ground-truth segment for one (video, class).
#[derive(Debug, Clone, Copy)]
pub struct GtSegment {
    pub video: usize,
    pub class: usize,
    pub start: usize,
    pub end: usize,
}

/// Segment-matching macro mAP at one IoU threshold: per class, predictions
/// rank by descending score (ties by insertion order); each prediction
/// greedily claims the unmatched same-video ground-truth segment of highest
/// IoU, and counts as a true positive when that IoU meets the threshold.
/// Classes without ground truth are skipped.
pub fn segment_map(
    preds: &[PredSegment],
    gts: &[GtSegment],
    classes: usize,
    iou_threshold: f64,
) -> Result<MapSummary, EvalError> {
    let mut total = 0.0;
    let mut scored = 0usize;
    let mut skipped = 0usize;
    for class in 0..classes {
        let class_gts: Vec<(usize, GtSegment)> = gts
            .iter()
            .enumerate()
            .filter(|(_, g)| g.class == class)
            .map(|(i, g)| (i, *g))
            .collect();
        if class_gts.is_empty() {
            skipped += 1;
            continue;
        }
        let mut class_preds: Vec<&PredSegment> =
            preds.iter().filter(|p| p.class == class).collect();
        class_preds.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        let mut claimed = vec![false; class_gts.len()];
        let mut hits = 0usize;
        let mut sum = 0.0;
        for (rank, p) in class_preds.iter().enumerate() {
            let mut best: Option<(usize, f64)> = None;
            for (slot, (_, g)) in class_gts.iter().enumerate() {
                if claimed[slot] || g.video != p.video {
                    continue;
                }
                let iou = interval_iou((p.start, p.end), (g.start, g.end));
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((slot, iou));
                }
            }
            if let Some((slot, iou)) = best {
                if iou >= iou_threshold {
                    claimed[slot] = true;
                    hits += 1;
                    sum += hits as f64 / (rank + 1) as f64;
                }
            }
        }
        total += sum / class_gts.len() as f64;
        scored += 1;
    }
    let map = if scored > 0 { total / scored as f64 } else { 0.0 };
    Ok(MapSummary { map, classes_scored: scored, classes_skipped: skipped })
}

/// Frame weights of the specification branch probed with one specification
/// per action class: `weights[video][class][frame]`. The plain probe is the
/// one-hot specification; the injected variant pads it to `k` hot entries
/// with seeded absent classes.
pub fn collect_frame_weights(
    model: &Model,
    data: &Dataset,
    injected: bool,
    k: usize,
    seed: u64,
) -> Result<Vec<Vec<Vec<f64>>>, EvalError> {
    let c = model.cfg.action_classes;
    let mut all = Vec::with_capacity(data.len());
    for (v, rec) in data.records.iter().enumerate() {
        let mut per_class = Vec::with_capacity(c);
        for class in 0..c {
            let mut sap = vec![0u8; c];
            sap[class] = 1;
            if injected {
                if k > c {
                    return Err(EvalError::Invalid(format!("k = {k} exceeds {c} classes")));
                }
                let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(
                    seed,
                    &[30, v as u64, class as u64],
                ));
                let mut absent: Vec<usize> = (0..c).filter(|&i| i != class).collect();
                for i in 0..k.saturating_sub(1) {
                    let j = rng.gen_range(i..absent.len());
                    absent.swap(i, j);
                    sap[absent[i]] = 1;
                }
            }
            let uap: Vec<u8> = sap.iter().map(|&b| 1 - b).collect();
            let mut tape = Tape64::new();
            let (out, _) = model.forward(&mut tape, &rec.seq, &sap, &uap, false, None)?;
            per_class.push(tape.value(out.readout_s.frame_weights).data().to_vec());
        }
        all.push(per_class);
    }
    Ok(all)
}

/// Segment mAP over a grid of binarization thresholds × IoU thresholds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalizationGrid {
    pub thetas: Vec<f64>,
    pub ious: Vec<f64>,
    /// `map[i][j]` = segment mAP at `(thetas[i], ious[j])`.
    pub map: Vec<Vec<f64>>,
}

pub const GRID_THRESHOLDS: [f64; 3] = [0.2, 0.5, 0.7];

/// Score cached frame weights against the dataset's annotated segments.
pub fn localization_grid(
    weights: &[Vec<Vec<f64>>],
    data: &Dataset,
    classes: usize,
    thetas: &[f64],
    ious: &[f64],
) -> Result<LocalizationGrid, EvalError> {
    if weights.len() != data.len() {
        return Err(EvalError::Invalid(format!(
            "{} weight rows vs {} videos",
            weights.len(),
            data.len()
        )));
    }
    let gts: Vec<GtSegment> = data
        .records
        .iter()
        .enumerate()
        .flat_map(|(v, rec)| {
            rec.ann.segments.iter().map(move |s| GtSegment {
                video: v,
                class: s.class,
                start: s.start,
                end: s.end,
            })
        })
        .collect();
    let weights = normalize_weights(weights);
    let mut grid = Vec::with_capacity(thetas.len());
    for &theta in thetas {
        let mut preds = Vec::new();
        for (v, per_class) in weights.iter().enumerate() {
            for (class, s) in per_class.iter().enumerate() {
                for seg in localize(s, theta)? {
                    preds.push(PredSegment {
                        video: v,
                        class,
                        start: seg.start,
                        end: seg.end,
                        score: seg.score,
                    });
                }
            }
        }
        let mut row = Vec::with_capacity(ious.len());
        for &iou in ious {
            row.push(segment_map(&preds, &gts, classes, iou)?.map);
        }
        grid.push(row);
    }
    Ok(LocalizationGrid { thetas: thetas.to_vec(), ious: ious.to_vec(), map: grid })
}

/// Pure per-frame variant: each (video, frame) is one ranked sample per
/// class, positive when the frame lies inside an annotated segment.
pub fn frame_level_ap(
    weights: &[Vec<Vec<f64>>],
    data: &Dataset,
    classes: usize,
) -> Result<MapSummary, EvalError> {
    if weights.len() != data.len() {
        return Err(EvalError::Invalid("weight/video count mismatch".into()));
    }
    let weights = normalize_weights(weights);
    let mut total = 0.0;
    let mut scored = 0usize;
    let mut skipped = 0usize;
    for class in 0..classes {
        let mut scores = Vec::new();
        let mut targets = Vec::new();
        for (v, rec) in data.records.iter().enumerate() {
            let n = rec.seq.num_frames;
            let mut hot = vec![0u8; n];
            for s in rec.ann.segments.iter().filter(|s| s.class == class) {
                for frame in s.start..=s.end {
                    hot[frame] = 1;
                }
            }
            scores.extend_from_slice(&weights[v][class]);
            targets.extend_from_slice(&hot);
        }
        match average_precision(&scores, &targets)? {
            Some(ap) => {
                total += ap;
                scored += 1;
            }
            None => skipped += 1,
        }
    }
    let map = if scored > 0 { total / scored as f64 } else { 0.0 };
    Ok(MapSummary { map, classes_scored: scored, classes_skipped: skipped })
}
