//! Scratch experiment runner: stage-1 training with a configurable step
//! rule for the readout frame scorers, reporting per-epoch inside/outside
//! segment score statistics. Not part of the product; used to pick the
//! frame-scorer optimization treatment.

use actdis::actionspec::build_pairs;
use actdis::config::RunConfig;
use actdis::eval::collect_frame_weights;
use actdis::model::Model;
use actdis::ssg::Dataset;
use actdis::synth::{derive_seed, generate_split};
use actdis::train::{sample_objective, ObjectiveMode};
use gradtape::{ParamStore64, Tape64};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

#[derive(Clone, Copy)]
enum FrameRule {
    Sgd(f64),
    Rms,
    Floor(f64),
}

struct LabOpt {
    lr: f64,
    rule: FrameRule,
    acc: Vec<Vec<f64>>,
    frame: Vec<bool>,
}

impl LabOpt {
    fn new(store: &ParamStore64, lr: f64, rule: FrameRule) -> Self {
        LabOpt {
            lr,
            rule,
            acc: store.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect(),
            frame: store.iter().map(|(_, p)| p.name.contains(".frame_")).collect(),
        }
    }

    fn step(&mut self, store: &mut ParamStore64, grads: &[Option<Vec<f64>>]) {
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (idx, id) in ids.iter().enumerate() {
            let Some(g) = grads[idx].as_ref() else { continue };
            let p = store.get_mut(*id);
            let data = p.tensor.data_mut();
            let acc = &mut self.acc[idx];
            let eps = if self.frame[idx] {
                match self.rule {
                    FrameRule::Sgd(scale) => {
                        for i in 0..data.len() {
                            data[i] -= self.lr * scale * g[i];
                        }
                        continue;
                    }
                    FrameRule::Rms => 1e-8,
                    FrameRule::Floor(f) => f,
                }
            } else {
                1e-8
            };
            for i in 0..data.len() {
                acc[i] = 0.99 * acc[i] + 0.01 * g[i] * g[i];
                data[i] -= self.lr * g[i] / (acc[i].sqrt() + eps);
            }
        }
    }
}

/// (inside mean, outside mean, absent mean, mean per-row AUC, focal-cell mAP)
fn gap_stats(model: &Model, val: &Dataset, k: usize, seed: u64) -> (f64, f64, f64, f64, f64) {
    let weights = collect_frame_weights(model, val, false, k, seed).unwrap();
    let focal = actdis::eval::localization_grid(
        &weights,
        val,
        model.cfg.action_classes,
        &[0.7],
        &[0.5],
    )
    .unwrap()
    .map[0][0];
    let (mut ins, mut outs, mut abs) = (vec![], vec![], vec![]);
    let mut aucs = vec![];
    for (rec, per_class) in val.records.iter().zip(&weights) {
        for (class, row) in per_class.iter().enumerate() {
            let segs: Vec<_> =
                rec.ann.segments.iter().filter(|s| s.class == class).collect();
            if segs.is_empty() {
                abs.extend(row.iter().copied());
            } else {
                let (mut row_in, mut row_out) = (vec![], vec![]);
                for (f, &w) in row.iter().enumerate() {
                    if segs.iter().any(|s| s.start <= f && f <= s.end) {
                        ins.push(w);
                        row_in.push(w);
                    } else {
                        outs.push(w);
                        row_out.push(w);
                    }
                }
                if !row_in.is_empty() && !row_out.is_empty() {
                    let mut wins = 0.0;
                    for &a in &row_in {
                        for &b in &row_out {
                            wins += if a > b {
                                1.0
                            } else if a == b {
                                0.5
                            } else {
                                0.0
                            };
                        }
                    }
                    aucs.push(wins / (row_in.len() * row_out.len()) as f64);
                }
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    (mean(&ins), mean(&outs), mean(&abs), mean(&aucs), focal)
}

/// After training: does the per-frame readout vector h_i separate inside
/// from outside frames? Reports the trained head's class-direction dot,
/// h_i norms, and a fitted logistic probe accuracy/AUC.
fn feature_probe(model: &Model, val: &Dataset) {
    let c_total = model.cfg.action_classes;
    let d = model.cfg.dim;
    let (n, m) = (model.cfg.frames, model.cfg.max_nodes);
    let (_, hp) = model.store.iter().find(|(_, p)| p.name == "head.s.w").unwrap();
    let hw = hp.tensor.data().to_vec();
    let cols = c_total + 1;
    let (mut ins_dot, mut out_dot) = (vec![], vec![]);
    let (mut ins_norm, mut out_norm) = (vec![], vec![]);
    let mut feats: Vec<(Vec<f64>, bool)> = vec![];
    for rec in &val.records {
        for class in 0..c_total {
            let segs: Vec<_> =
                rec.ann.segments.iter().filter(|s| s.class == class).collect();
            if segs.is_empty() {
                continue;
            }
            let mut sap = vec![0u8; c_total];
            sap[class] = 1;
            let uap: Vec<u8> = sap.iter().map(|&b| 1 - b).collect();
            let mut tape = Tape64::new();
            let (out, _) = model.forward(&mut tape, &rec.seq, &sap, &uap, false, None).unwrap();
            let f = tape.value(out.f_s).data().to_vec();
            let nw = tape.value(out.readout_s.node_weights).data().to_vec();
            for i in 0..n {
                let mut h = vec![0.0; d];
                for j in 0..m {
                    let w = nw[i * m + j];
                    for k in 0..d {
                        h[k] += w * f[(i * m + j) * d + k];
                    }
                }
                let dot: f64 = (0..d).map(|k| h[k] * hw[k * cols + class]).sum();
                let norm: f64 = h.iter().map(|v| v * v).sum::<f64>().sqrt();
                let inside = segs.iter().any(|s| s.start <= i && i <= s.end);
                if inside {
                    ins_dot.push(dot);
                    ins_norm.push(norm);
                } else {
                    out_dot.push(dot);
                    out_norm.push(norm);
                }
                feats.push((h, inside));
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    println!(
        "head-dir dot: inside {:.4}  outside {:.4}   |h|: inside {:.4}  outside {:.4}",
        mean(&ins_dot),
        mean(&out_dot),
        mean(&ins_norm),
        mean(&out_norm)
    );

    // Standardize, then full-batch logistic regression as a separability probe.
    let nfeat = feats.len();
    let mut mu = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for (h, _) in &feats {
        for k in 0..d {
            mu[k] += h[k] / nfeat as f64;
        }
    }
    for (h, _) in &feats {
        for k in 0..d {
            sd[k] += (h[k] - mu[k]).powi(2) / nfeat as f64;
        }
    }
    for k in 0..d {
        sd[k] = sd[k].sqrt().max(1e-9);
    }
    let x: Vec<Vec<f64>> = feats
        .iter()
        .map(|(h, _)| (0..d).map(|k| (h[k] - mu[k]) / sd[k]).collect())
        .collect();
    let y: Vec<f64> = feats.iter().map(|(_, l)| if *l { 1.0 } else { 0.0 }).collect();
    let pos = y.iter().sum::<f64>();
    let (mut w, mut b) = (vec![0.0; d], 0.0);
    for _ in 0..400 {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (xi, yi) in x.iter().zip(&y) {
            let z: f64 = xi.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b;
            let p = 1.0 / (1.0 + (-z).exp());
            let e = (p - yi) / nfeat as f64;
            for k in 0..d {
                gw[k] += e * xi[k];
            }
            gb += e;
        }
        for k in 0..d {
            w[k] -= 0.5 * gw[k];
        }
        b -= 0.5 * gb;
    }
    let scores: Vec<f64> = x
        .iter()
        .map(|xi| xi.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b)
        .collect();
    let mut idx: Vec<usize> = (0..nfeat).collect();
    idx.sort_by(|&a, &c| scores[a].partial_cmp(&scores[c]).unwrap());
    let mut rank_sum = 0.0;
    for (rank, &i) in idx.iter().enumerate() {
        if y[i] > 0.5 {
            rank_sum += (rank + 1) as f64;
        }
    }
    let neg = nfeat as f64 - pos;
    let auc = (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
    let acc = scores
        .iter()
        .zip(&y)
        .filter(|(s, yi)| (**s > 0.0) == (**yi > 0.5))
        .count() as f64
        / nfeat as f64;
    println!("logistic probe on h_i: acc {acc:.3}  auc {auc:.3}  (pos rate {:.3})", pos / nfeat as f64);
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let rule = match args.get(1).map(String::as_str) {
        Some("rms") => FrameRule::Rms,
        Some(s) if s.starts_with("sgd") => FrameRule::Sgd(s[3..].parse().unwrap()),
        Some(s) if s.starts_with("floor") => FrameRule::Floor(s[5..].parse().unwrap()),
        other => panic!("variant? (rms | sgdN | floorX), got {other:?}"),
    };
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(8);
    let videos: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(150);

    let mut cfg = RunConfig::default();
    cfg.train_videos = videos;
    cfg.val_videos = 60;
    let gen = cfg.gen_config();
    let train_data = generate_split(&gen, "train", cfg.train_videos).unwrap();
    let val_data = generate_split(&gen, "val", cfg.val_videos).unwrap();

    let mut model = Model::new(cfg.model_config(), cfg.seed);
    let settings = cfg.train_settings(1);
    let mut opt = LabOpt::new(&model.store, settings.lr, rule);

    for epoch in 0..epochs {
        let mut pair_sets = Vec::with_capacity(train_data.len());
        for (v, rec) in train_data.records.iter().enumerate() {
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(
                settings.seed,
                &[1, epoch as u64, v as u64],
            ));
            pair_sets.push(build_pairs(&rec.ann.labels, settings.k, &mut rng).unwrap().pairs);
        }
        let mut samples: Vec<(usize, usize)> = pair_sets
            .iter()
            .enumerate()
            .flat_map(|(v, ps)| (0..ps.len()).map(move |p| (v, p)))
            .collect();
        let mut shuffle_rng =
            ChaCha12Rng::seed_from_u64(derive_seed(settings.seed, &[2, epoch as u64]));
        samples.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let n = model.cfg.frames;
        for batch in samples.chunks(settings.batch_size) {
            let mut grad_sums: Vec<Option<Vec<f64>>> = vec![None; model.store.len()];
            let inv_b = 1.0 / batch.len() as f64;
            let mut mu_sums = vec![0.0f64; n];
            let mut mu_counts = vec![0.0f64; n];
            for &(v, p) in batch {
                let rec = &train_data.records[v];
                let pair = &pair_sets[v][p];
                let mut noise_rng = ChaCha12Rng::seed_from_u64(derive_seed(
                    settings.seed,
                    &[3, epoch as u64, v as u64, p as u64],
                ));
                let mut tape = Tape64::new();
                let (out, binds) = model
                    .forward(&mut tape, &rec.seq, &pair.sap, &pair.uap, false, Some(&mut noise_rng))
                    .unwrap();
                let loss = sample_objective(
                    &mut tape,
                    &out,
                    pair,
                    &rec.ann.labels,
                    &rec.seq.node_mask,
                    model.cfg.dim,
                    &settings.weights,
                    ObjectiveMode::Stage1,
                )
                .unwrap();
                loss_sum += tape.value(loss.total).item();
                let grads = tape.backward(loss.total).unwrap();
                for (idx, (pid, param)) in model.store.iter().enumerate() {
                    if !param.trainable {
                        continue;
                    }
                    if let Some(g) = grads.get(binds.id(pid)) {
                        let sum = grad_sums[idx].get_or_insert_with(|| vec![0.0; g.numel()]);
                        for (s, &gi) in sum.iter_mut().zip(g.data()) {
                            *s += gi * inv_b;
                        }
                    }
                }
                for i in 0..n {
                    mu_sums[i] += out.fo_frame_sums[i];
                    mu_counts[i] += out.fo_frame_counts[i];
                }
            }
            opt.step(&mut model.store, &grad_sums);
            for l in 0..model.cfg.layers {
                let mut mu_g = model.mu_g(l);
                for i in 0..n {
                    if mu_counts[i] > 0.0 {
                        let mu = mu_sums[i] / mu_counts[i];
                        mu_g[i] = model.cfg.momentum * mu_g[i] + (1.0 - model.cfg.momentum) * mu;
                    }
                }
                model.set_mu_g(l, &mu_g);
            }
        }
        let (ins, outs, abs, auc, focal) = gap_stats(&model, &val_data, cfg.k, cfg.seed);
        println!(
            "epoch {epoch:2}  loss {:.4}  inside {ins:.3}  outside {outs:.3}  absent {abs:.3}  gap {:+.3}  rowAUC {auc:.3}  focal {focal:.3}",
            loss_sum / samples.len() as f64,
            ins - outs,
        );
    }
    feature_probe(&model, &val_data);
}
