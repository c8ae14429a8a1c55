//! The assembled model: object/relation embeddings, a minimal
//! spatial-temporal attention encoder, the prompt module applied per branch,
//! the shared graph network, fusion-based reconstruction, four readout
//! blocks and four linear classifier heads.
//!
//! All weights live in a [`ParamStore64`] under dotted names
//! (`embed.*`, `encoder.*`, `prompt.*`, `vgpnn.{layer}.*`, `fusion.*`,
//! `readout.*`, `head.*`), so stage freezing, checkpointing and the
//! optimizer all work by name prefix. Per-layer running means
//! (`vgpnn.{l}.norm.mu_g`) are stored as never-trainable parameters and
//! updated outside gradient descent.

use crate::actionspec::encode_spec;
use crate::dpm::{self, PromptBank, WeightActivation};
use crate::objective::FusionNets;
use crate::ssg::SceneGraphSequence;
use crate::vgpnn::{
    self, identity_fuse_weights, EdgeTensor, LayerParams, MessageParams, NormParams, Readout,
    ReadoutParams, UpdateParams,
};
use gradtape::nn::{linear, mask_tensor, self_attention, AttnParams};
use gradtape::{Bindings, ParamStore64, Tape64, TapeError, Tensor64, ValueId};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;

/// Geometry and behavior switches for one model instance.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// Action classes C; heads emit C+1 logits (the extra is "no-action").
    pub action_classes: usize,
    /// Object vocabulary rows (class 0 is the padding row).
    pub object_classes: usize,
    /// Relation vocabulary rows.
    pub relation_types: usize,
    /// Frames per video N (fixed per dataset).
    pub frames: usize,
    /// Node slots per frame M.
    pub max_nodes: usize,
    /// Feature dimension D (nodes and edges).
    pub dim: usize,
    /// Candidate prompts per specification T.
    pub prompts: usize,
    /// Graph-network depth.
    pub layers: usize,
    /// Hidden width of the gate / readout / fusion MLPs.
    pub hidden: usize,
    /// Running-mean momentum for frame normalization.
    pub momentum: f64,
    pub eps: f64,
    /// Train-time jitter std on embedded node features.
    pub feature_noise: f64,
    pub weight_activation: WeightActivation,
    /// Replace the prompt module with a static per-spec prompt.
    pub simple_prompt: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            action_classes: 6,
            object_classes: 8,
            relation_types: 7,
            frames: 8,
            max_nodes: 6,
            dim: 32,
            prompts: 3,
            layers: 2,
            hidden: 32,
            momentum: 0.9,
            eps: 1e-5,
            feature_noise: 0.05,
            weight_activation: WeightActivation::Softmax,
            simple_prompt: false,
        }
    }
}

impl ModelConfig {
    /// Smallest full-featured geometry; used by gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            action_classes: 3,
            object_classes: 4,
            relation_types: 4,
            frames: 2,
            max_nodes: 2,
            dim: 4,
            prompts: 2,
            layers: 1,
            hidden: 4,
            momentum: 0.9,
            eps: 1e-5,
            feature_noise: 0.0,
            weight_activation: WeightActivation::Softmax,
            simple_prompt: false,
        }
    }
}

/// Everything one forward pass exposes to training and evaluation.
pub struct ForwardOutput {
    /// Encoder output `[N, M, D]`.
    pub f_o: ValueId,
    /// Branch features `[N, M, D]`.
    pub f_s: ValueId,
    pub f_u: ValueId,
    /// Reconstruction `[N, M, D]` and fusion weights `[N, M]`.
    pub f_r: ValueId,
    pub delta: ValueId,
    /// Classifier logits, length C+1 each.
    pub a_u: ValueId,
    pub a_s: ValueId,
    pub a_t: ValueId,
    /// Auxiliary logits on the original features; present when requested.
    pub a_m: Option<ValueId>,
    /// Specification-branch readout; its frame scores drive localization.
    pub readout_s: Readout,
    /// Mask-aware per-frame sums / element counts of the encoder output,
    /// the statistics the running normalization mean is updated from.
    pub fo_frame_sums: Vec<f64>,
    pub fo_frame_counts: Vec<f64>,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore64,
}

fn xavier(rng: &mut ChaCha12Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor64 {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor64::from_vec(shape.to_vec(), data).expect("init shape")
}

fn uniform(rng: &mut ChaCha12Rng, shape: &[usize], bound: f64) -> Tensor64 {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor64::from_vec(shape.to_vec(), data).expect("init shape")
}

/// Standard normal via Box-Muller, deterministic in the rng stream.
fn gaussian(rng: &mut ChaCha12Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

impl Model {
    /// Build and initialize all parameters, deterministically in `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut store = ParamStore64::new();
        let (c, d, h) = (cfg.action_classes, cfg.dim, cfg.hidden);
        let (n, t) = (cfg.frames, cfg.prompts);
        let add = |store: &mut ParamStore64, name: String, tensor: Tensor64, trainable: bool| {
            store.add(&name, tensor, trainable).expect("unique parameter name");
        };
        let attn = |store: &mut ParamStore64, rng: &mut ChaCha12Rng, prefix: &str| {
            for w in ["wq", "wk", "wv"] {
                let tensor = xavier(rng, &[d, d], d, d);
                store.add(&format!("{prefix}.{w}"), tensor, true).expect("unique");
            }
            for b in ["bq", "bk", "bv"] {
                store.add(&format!("{prefix}.{b}"), Tensor64::zeros(&[d]), true).expect("unique");
            }
        };

        add(&mut store, "embed.object".into(), uniform(&mut rng, &[cfg.object_classes, d], 0.5), true);
        add(&mut store, "embed.relation".into(), uniform(&mut rng, &[cfg.relation_types, d], 0.5), true);
        attn(&mut store, &mut rng, "encoder.spatial");
        attn(&mut store, &mut rng, "encoder.temporal");

        add(&mut store, "prompt.wq".into(), xavier(&mut rng, &[c, t * d], c, t * d), true);
        add(&mut store, "prompt.bq".into(), Tensor64::zeros(&[t * d]), true);
        add(&mut store, "prompt.wy".into(), xavier(&mut rng, &[c, d], c, d), true);
        add(&mut store, "prompt.ww".into(), xavier(&mut rng, &[d, t], d, t), true);
        add(&mut store, "prompt.simple.wp".into(), xavier(&mut rng, &[c, d], c, d), true);

        for l in 0..cfg.layers {
            attn(&mut store, &mut rng, &format!("vgpnn.{l}.link"));
            add(&mut store, format!("vgpnn.{l}.msg.proj_w"), xavier(&mut rng, &[2 * d, d], 2 * d, d), true);
            add(&mut store, format!("vgpnn.{l}.msg.proj_b"), Tensor64::zeros(&[d]), true);
            add(&mut store, format!("vgpnn.{l}.msg.gate_w1"), xavier(&mut rng, &[d, h], d, h), true);
            add(&mut store, format!("vgpnn.{l}.msg.gate_b1"), Tensor64::zeros(&[h]), true);
            add(&mut store, format!("vgpnn.{l}.msg.gate_w2"), xavier(&mut rng, &[h, d], h, d), true);
            add(&mut store, format!("vgpnn.{l}.msg.gate_b2"), Tensor64::zeros(&[d]), true);
            add(&mut store, format!("vgpnn.{l}.fuse.w"), identity_fuse_weights(d), true);
            add(&mut store, format!("vgpnn.{l}.fuse.b"), Tensor64::zeros(&[d]), true);
            add(&mut store, format!("vgpnn.{l}.norm.alpha"), Tensor64::full(&[n], 1.0), true);
            add(&mut store, format!("vgpnn.{l}.norm.gamma"), Tensor64::full(&[n], 1.0), true);
            add(&mut store, format!("vgpnn.{l}.norm.beta"), Tensor64::zeros(&[n]), true);
            add(&mut store, format!("vgpnn.{l}.norm.mu_g"), Tensor64::zeros(&[n]), false);
        }

        // Fusion: the blend-weight head starts at delta = 1/2 (zero final
        // layer) and the reconstruction map starts at identity (residual
        // with a zero final layer).
        add(&mut store, "fusion.net1.w1".into(), xavier(&mut rng, &[d, h], d, h), true);
        add(&mut store, "fusion.net1.b1".into(), Tensor64::zeros(&[h]), true);
        add(&mut store, "fusion.net1.w2".into(), Tensor64::zeros(&[h, d]), true);
        add(&mut store, "fusion.net1.b2".into(), Tensor64::zeros(&[d]), true);
        add(&mut store, "fusion.net2.w1".into(), xavier(&mut rng, &[2 * d, h], 2 * d, h), true);
        add(&mut store, "fusion.net2.b1".into(), Tensor64::zeros(&[h]), true);
        add(&mut store, "fusion.net2.w2".into(), Tensor64::zeros(&[h, 1]), true);
        add(&mut store, "fusion.net2.b2".into(), Tensor64::zeros(&[1]), true);

        for block in ["u", "s", "fused", "aux"] {
            for part in ["node", "frame"] {
                add(&mut store, format!("readout.{block}.{part}_w1"), xavier(&mut rng, &[d, h], d, h), true);
                add(&mut store, format!("readout.{block}.{part}_b1"), Tensor64::zeros(&[h]), true);
                add(&mut store, format!("readout.{block}.{part}_w2"), xavier(&mut rng, &[h, 1], h, 1), true);
                add(&mut store, format!("readout.{block}.{part}_b2"), Tensor64::zeros(&[1]), true);
            }
        }
        for head in ["u", "s", "t", "m"] {
            add(&mut store, format!("head.{head}.w"), xavier(&mut rng, &[d, c + 1], d, c + 1), true);
            add(&mut store, format!("head.{head}.b"), Tensor64::zeros(&[c + 1]), true);
        }
        Model { cfg, store }
    }

    fn vid(&self, binds: &Bindings, name: &str) -> ValueId {
        binds.id(self.store.lookup(name).unwrap_or_else(|| panic!("parameter {name}")))
    }

    fn attn_params(&self, binds: &Bindings, prefix: &str) -> AttnParams {
        AttnParams {
            wq: self.vid(binds, &format!("{prefix}.wq")),
            bq: self.vid(binds, &format!("{prefix}.bq")),
            wk: self.vid(binds, &format!("{prefix}.wk")),
            bk: self.vid(binds, &format!("{prefix}.bk")),
            wv: self.vid(binds, &format!("{prefix}.wv")),
            bv: self.vid(binds, &format!("{prefix}.bv")),
        }
    }

    fn layer_params(&self, binds: &Bindings, l: usize) -> LayerParams {
        LayerParams {
            link: self.attn_params(binds, &format!("vgpnn.{l}.link")),
            msg: MessageParams {
                proj_w: self.vid(binds, &format!("vgpnn.{l}.msg.proj_w")),
                proj_b: self.vid(binds, &format!("vgpnn.{l}.msg.proj_b")),
                gate_w1: self.vid(binds, &format!("vgpnn.{l}.msg.gate_w1")),
                gate_b1: self.vid(binds, &format!("vgpnn.{l}.msg.gate_b1")),
                gate_w2: self.vid(binds, &format!("vgpnn.{l}.msg.gate_w2")),
                gate_b2: self.vid(binds, &format!("vgpnn.{l}.msg.gate_b2")),
            },
            upd: UpdateParams {
                fuse_w: self.vid(binds, &format!("vgpnn.{l}.fuse.w")),
                fuse_b: self.vid(binds, &format!("vgpnn.{l}.fuse.b")),
            },
            norm: NormParams {
                alpha: self.vid(binds, &format!("vgpnn.{l}.norm.alpha")),
                gamma: self.vid(binds, &format!("vgpnn.{l}.norm.gamma")),
                beta: self.vid(binds, &format!("vgpnn.{l}.norm.beta")),
            },
        }
    }

    fn readout_params(&self, binds: &Bindings, block: &str) -> ReadoutParams {
        let g = |suffix: &str| self.vid(binds, &format!("readout.{block}.{suffix}"));
        ReadoutParams {
            node_w1: g("node_w1"),
            node_b1: g("node_b1"),
            node_w2: g("node_w2"),
            node_b2: g("node_b2"),
            frame_w1: g("frame_w1"),
            frame_b1: g("frame_b1"),
            frame_w2: g("frame_w2"),
            frame_b2: g("frame_b2"),
        }
    }

    /// Current running mean of layer `l`.
    pub fn mu_g(&self, l: usize) -> Vec<f64> {
        let id = self.store.lookup(&format!("vgpnn.{l}.norm.mu_g")).expect("mu_g");
        self.store.get(id).tensor.data().to_vec()
    }

    /// Overwrite the running mean of layer `l`.
    pub fn set_mu_g(&mut self, l: usize, values: &[f64]) {
        let id = self.store.lookup(&format!("vgpnn.{l}.norm.mu_g")).expect("mu_g");
        let tensor = Tensor64::from_f64(&[values.len()], values).expect("mu_g shape");
        assert_eq!(tensor.shape(), self.store.get(id).tensor.shape(), "mu_g length");
        self.store.get_mut(id).tensor = tensor;
    }

    /// Stage 1 trains everything; stage 2 trains only the classifier heads
    /// and the auxiliary readout. Running means are never trainable.
    pub fn set_stage(&mut self, stage: u8) {
        match stage {
            1 => {
                self.store.set_trainable_where(true, |_| true);
                self.store.set_trainable_where(false, |n| n.ends_with(".mu_g"));
            }
            2 => {
                self.store.set_trainable_where(false, |_| true);
                self.store.set_trainable_where(true, |n| {
                    n.starts_with("head.") || n.starts_with("readout.aux.")
                });
            }
            other => panic!("stage must be 1 or 2, got {other}"),
        }
    }

    /// One classifier head applied to a readout global vector.
    fn head(
        &self,
        tape: &mut Tape64,
        binds: &Bindings,
        name: &str,
        global: ValueId,
    ) -> Result<ValueId, TapeError> {
        let w = self.vid(binds, &format!("head.{name}.w"));
        let b = self.vid(binds, &format!("head.{name}.b"));
        linear(tape, global, w, Some(b))
    }

    /// Run the whole pipeline for one video and one specification pair.
    ///
    /// `with_aux` additionally evaluates the auxiliary readout and head on
    /// the encoder output (skipped during stage-1 training, where it takes
    /// no gradient). `noise`, when provided together with a positive
    /// configured jitter, perturbs unmasked embedded node features — the
    /// train-time augmentation. Normalization always runs against the
    /// stored running means; committing new statistics is the trainer's
    /// job, via [`ForwardOutput::fo_frame_sums`] and [`Model::set_mu_g`].
    pub fn forward(
        &self,
        tape: &mut Tape64,
        seq: &SceneGraphSequence,
        sap: &[u8],
        uap: &[u8],
        with_aux: bool,
        mut noise: Option<&mut ChaCha12Rng>,
    ) -> Result<(ForwardOutput, Bindings), TapeError> {
        let cfg = &self.cfg;
        let (n, m, d, c) = (cfg.frames, cfg.max_nodes, cfg.dim, cfg.action_classes);
        if seq.num_frames != n || seq.max_nodes != m {
            return Err(TapeError::Invalid {
                op: "model_forward",
                msg: format!(
                    "video is {}x{}, model built for {}x{}",
                    seq.num_frames, seq.max_nodes, n, m
                ),
            });
        }
        if sap.len() != c || uap.len() != c {
            return Err(TapeError::Invalid {
                op: "model_forward",
                msg: format!("specification length {} != {} classes", sap.len().max(uap.len()), c),
            });
        }
        let binds = self.store.bind(tape)?;
        let mask = &seq.node_mask;

        // Node features: one embedding row per slot, masked slots zeroed.
        let table = self.vid(&binds, "embed.object");
        let ids: Vec<usize> = seq.node_class.iter().map(|&cl| cl as usize).collect();
        let emb = tape.embed(table, &ids)?;
        let emb = tape.reshape(emb, &[n, m, d])?;
        let mk = mask_tensor(tape, mask, &[n, m, 1])?;
        let mk = tape.broadcast(mk, &[n, m, d])?;
        let mut x = tape.mul(emb, mk)?;
        if cfg.feature_noise > 0.0 {
            if let Some(rng) = noise.as_deref_mut() {
                let mut jitter = vec![0.0f64; n * m * d];
                for (slot, &live) in mask.iter().enumerate() {
                    if live {
                        for k in 0..d {
                            jitter[slot * d + k] = cfg.feature_noise * gaussian(rng);
                        }
                    }
                }
                let j = tape.constant(Tensor64::from_vec(vec![n, m, d], jitter).unwrap())?;
                x = tape.add(x, j)?;
            }
        }

        // Encoder: attention over nodes within each frame, then over each
        // slot's trajectory across frames.
        let spatial = self.attn_params(&binds, "encoder.spatial");
        let x = self_attention(tape, x, mask, &spatial)?;
        let temporal = self.attn_params(&binds, "encoder.temporal");
        let xt = tape.permute(x, &[1, 0, 2])?;
        let mut tmask = vec![false; m * n];
        for i in 0..n {
            for j in 0..m {
                tmask[j * n + i] = mask[i * m + j];
            }
        }
        let yt = self_attention(tape, xt, &tmask, &temporal)?;
        let f_o = tape.permute(yt, &[1, 0, 2])?;

        // Statistics the trainer folds into the running normalization means.
        let fo_val = tape.value(f_o).data().to_vec();
        let mut fo_frame_sums = vec![0.0f64; n];
        let mut fo_frame_counts = vec![0.0f64; n];
        for i in 0..n {
            for j in 0..m {
                if mask[i * m + j] {
                    let base = (i * m + j) * d;
                    fo_frame_sums[i] += fo_val[base..base + d].iter().sum::<f64>();
                    fo_frame_counts[i] += d as f64;
                }
            }
        }

        // Prompted branch inputs from the shared prompt parameters.
        let v_sap = tape.constant(encode_spec(sap))?;
        let v_uap = tape.constant(encode_spec(uap))?;
        let (prompted_s, prompted_u) = if cfg.simple_prompt {
            let wp = self.vid(&binds, "prompt.simple.wp");
            (
                dpm::apply_simple(tape, wp, f_o, mask, v_sap)?,
                dpm::apply_simple(tape, wp, f_o, mask, v_uap)?,
            )
        } else {
            let bank = PromptBank {
                wq: self.vid(&binds, "prompt.wq"),
                bq: self.vid(&binds, "prompt.bq"),
                wy: self.vid(&binds, "prompt.wy"),
                ww: self.vid(&binds, "prompt.ww"),
                t: cfg.prompts,
                d,
            };
            let act = cfg.weight_activation;
            (
                dpm::apply(tape, &bank, act, f_o, mask, v_sap)?,
                dpm::apply(tape, &bank, act, f_o, mask, v_uap)?,
            )
        };

        // Shared graph network: one edge stream feeds both node streams.
        let layers: Vec<LayerParams> = (0..cfg.layers).map(|l| self.layer_params(&binds, l)).collect();
        let mu_g: Vec<Vec<f64>> = (0..cfg.layers).map(|l| self.mu_g(l)).collect();
        let rel_table = self.vid(&binds, "embed.relation");
        let edges: EdgeTensor = vgpnn::edge_features(tape, seq, rel_table)?;
        let linked = vgpnn::edge_stream(tape, &edges, &layers)?;
        let (f_s, _) = vgpnn::node_stream(
            tape, prompted_s, &linked, mask, &layers, &mu_g, cfg.momentum, cfg.eps, false,
        )?;
        let (f_u, _) = vgpnn::node_stream(
            tape, prompted_u, &linked, mask, &layers, &mu_g, cfg.momentum, cfg.eps, false,
        )?;

        let nets = FusionNets {
            net1_w1: self.vid(&binds, "fusion.net1.w1"),
            net1_b1: self.vid(&binds, "fusion.net1.b1"),
            net1_w2: self.vid(&binds, "fusion.net1.w2"),
            net1_b2: self.vid(&binds, "fusion.net1.b2"),
            net2_w1: self.vid(&binds, "fusion.net2.w1"),
            net2_b1: self.vid(&binds, "fusion.net2.b1"),
            net2_w2: self.vid(&binds, "fusion.net2.w2"),
            net2_b2: self.vid(&binds, "fusion.net2.b2"),
        };
        let (f_r, delta) = crate::objective::reconstruct(tape, f_u, f_s, mask, &nets)?;

        let ro_u = vgpnn::readout(tape, f_u, mask, &self.readout_params(&binds, "u"), cfg.eps)?;
        let ro_s = vgpnn::readout(tape, f_s, mask, &self.readout_params(&binds, "s"), cfg.eps)?;
        let ro_t = vgpnn::readout(tape, f_r, mask, &self.readout_params(&binds, "fused"), cfg.eps)?;
        let a_u = self.head(tape, &binds, "u", ro_u.global)?;
        let a_s = self.head(tape, &binds, "s", ro_s.global)?;
        let a_t = self.head(tape, &binds, "t", ro_t.global)?;
        let a_m = if with_aux {
            let ro_m = vgpnn::readout(tape, f_o, mask, &self.readout_params(&binds, "aux"), cfg.eps)?;
            Some(self.head(tape, &binds, "m", ro_m.global)?)
        } else {
            None
        };

        Ok((
            ForwardOutput {
                f_o,
                f_s,
                f_u,
                f_r,
                delta,
                a_u,
                a_s,
                a_t,
                a_m,
                readout_s: ro_s,
                fo_frame_sums,
                fo_frame_counts,
            },
            binds,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssg::{Relation, SceneGraphSequence};

    fn toy_seq(n: usize, m: usize) -> SceneGraphSequence {
        let mut node_class = vec![0u32; n * m];
        let mut node_mask = vec![false; n * m];
        for i in 0..n {
            for j in 0..m.min(2) {
                node_class[i * m + j] = 1 + j as u32;
                node_mask[i * m + j] = true;
            }
        }
        let relations = (0..n)
            .map(|i| Relation { frame: i, src: 0, dst: 1, rel: if i < n / 2 { 0 } else { 1 } })
            .collect();
        SceneGraphSequence {
            video_id: "toy".into(),
            num_frames: n,
            max_nodes: m,
            node_class,
            node_mask,
            relations,
        }
    }

    fn tiny_model() -> Model {
        Model::new(ModelConfig::tiny(), 3)
    }

    #[test]
    fn construction_is_deterministic_in_the_seed() {
        let a = Model::new(ModelConfig::tiny(), 9);
        let b = Model::new(ModelConfig::tiny(), 9);
        let c = Model::new(ModelConfig::tiny(), 10);
        let mut any_differs = false;
        for ((_, pa), (_, pb)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.tensor.data(), pb.tensor.data(), "{}", pa.name);
        }
        for ((_, pa), (_, pc)) in a.store.iter().zip(c.store.iter()) {
            any_differs |= pa.tensor.data() != pc.tensor.data();
        }
        assert!(any_differs, "different seeds must change some weights");
    }

    #[test]
    fn running_means_are_never_trainable() {
        let model = tiny_model();
        for (_, p) in model.store.iter() {
            if p.name.ends_with(".mu_g") {
                assert!(!p.trainable, "{}", p.name);
            }
        }
    }

    #[test]
    fn forward_emits_finite_logits_of_c_plus_one() {
        let model = tiny_model();
        let seq = toy_seq(2, 2);
        let mut tape = Tape64::new();
        let (out, _) =
            model.forward(&mut tape, &seq, &[1, 0, 0], &[0, 1, 1], true, None).unwrap();
        for head in [out.a_u, out.a_s, out.a_t, out.a_m.unwrap()] {
            let v = tape.value(head);
            assert_eq!(v.shape(), &[4]);
            assert!(v.data().iter().all(|x| x.is_finite()));
        }
        assert_eq!(tape.shape(out.f_o), &[2, 2, 4]);
        assert_eq!(tape.shape(out.f_r), &[2, 2, 4]);
        assert_eq!(tape.shape(out.delta), &[2, 2]);
        assert_eq!(tape.shape(out.readout_s.frame_weights), &[2]);
    }

    #[test]
    fn forward_is_deterministic() {
        let model = tiny_model();
        let seq = toy_seq(2, 2);
        let run = || {
            let mut tape = Tape64::new();
            let (out, _) =
                model.forward(&mut tape, &seq, &[1, 1, 0], &[0, 0, 1], true, None).unwrap();
            (
                tape.value(out.a_u).data().to_vec(),
                tape.value(out.a_t).data().to_vec(),
                tape.value(out.f_s).data().to_vec(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn swapping_the_specification_pair_swaps_branch_features() {
        let model = tiny_model();
        let seq = toy_seq(2, 2);
        let mut tape = Tape64::new();
        let (fwd, _) = model.forward(&mut tape, &seq, &[1, 0, 1], &[0, 1, 0], false, None).unwrap();
        let mut tape2 = Tape64::new();
        let (rev, _) =
            model.forward(&mut tape2, &seq, &[0, 1, 0], &[1, 0, 1], false, None).unwrap();
        assert_eq!(tape.value(fwd.f_s).data(), tape2.value(rev.f_u).data());
        assert_eq!(tape.value(fwd.f_u).data(), tape2.value(rev.f_s).data());
    }

    #[test]
    fn masked_slots_stay_zero_everywhere() {
        let model = Model::new(
            ModelConfig { max_nodes: 3, ..ModelConfig::tiny() },
            5,
        );
        let seq = toy_seq(2, 3); // slot 2 of each frame is masked
        let mut tape = Tape64::new();
        let (out, _) = model.forward(&mut tape, &seq, &[1, 0, 0], &[0, 1, 1], false, None).unwrap();
        for f in [out.f_o, out.f_s, out.f_u, out.f_r] {
            let v = tape.value(f).data();
            for i in 0..2 {
                let base = (i * 3 + 2) * 4;
                assert!(v[base..base + 4].iter().all(|&x| x == 0.0), "slot (f{i}, n2)");
            }
        }
    }

    #[test]
    fn aux_branch_is_opt_in() {
        let model = tiny_model();
        let seq = toy_seq(2, 2);
        let mut tape = Tape64::new();
        let (out, _) = model.forward(&mut tape, &seq, &[1, 0, 0], &[0, 1, 1], false, None).unwrap();
        assert!(out.a_m.is_none());
    }

    #[test]
    fn jitter_changes_features_only_on_live_slots_and_reproduces_by_seed() {
        let cfg = ModelConfig { feature_noise: 0.1, max_nodes: 3, ..ModelConfig::tiny() };
        let model = Model::new(cfg, 4);
        let seq = toy_seq(2, 3);
        let run = |seed: u64| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let mut tape = Tape64::new();
            let (out, _) = model
                .forward(&mut tape, &seq, &[1, 0, 0], &[0, 1, 1], false, Some(&mut rng))
                .unwrap();
            tape.value(out.f_o).data().to_vec()
        };
        let a = run(1);
        let b = run(1);
        let c = run(2);
        assert_eq!(a, b);
        assert_ne!(a, c);
        // Masked slot stays exactly zero under jitter.
        for i in 0..2 {
            let base = (i * 3 + 2) * 4;
            assert!(a[base..base + 4].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn stage_two_freezes_everything_but_heads_and_aux_readout() {
        let mut model = tiny_model();
        model.set_stage(2);
        for (_, p) in model.store.iter() {
            let expect = p.name.starts_with("head.") || p.name.starts_with("readout.aux.");
            assert_eq!(p.trainable, expect, "{}", p.name);
        }
        model.set_stage(1);
        for (_, p) in model.store.iter() {
            let expect = !p.name.ends_with(".mu_g");
            assert_eq!(p.trainable, expect, "{}", p.name);
        }
    }

    #[test]
    fn simple_prompt_variant_runs_and_differs() {
        let seq = toy_seq(2, 2);
        let full = tiny_model();
        let simple = Model::new(ModelConfig { simple_prompt: true, ..ModelConfig::tiny() }, 3);
        let mut t1 = Tape64::new();
        let (o1, _) = full.forward(&mut t1, &seq, &[1, 0, 0], &[0, 1, 1], false, None).unwrap();
        let mut t2 = Tape64::new();
        let (o2, _) = simple.forward(&mut t2, &seq, &[1, 0, 0], &[0, 1, 1], false, None).unwrap();
        assert_ne!(t1.value(o1.f_s).data(), t2.value(o2.f_s).data());
    }

    #[test]
    fn mu_g_round_trip_and_effect_on_forward() {
        let mut model = tiny_model();
        assert_eq!(model.mu_g(0), vec![0.0, 0.0]);
        let seq = toy_seq(2, 2);
        let mut tape = Tape64::new();
        let (before, _) =
            model.forward(&mut tape, &seq, &[1, 0, 0], &[0, 1, 1], false, None).unwrap();
        let base = tape.value(before.f_s).data().to_vec();
        model.set_mu_g(0, &[0.7, -0.3]);
        assert_eq!(model.mu_g(0), vec![0.7, -0.3]);
        let mut tape2 = Tape64::new();
        let (after, _) =
            model.forward(&mut tape2, &seq, &[1, 0, 0], &[0, 1, 1], false, None).unwrap();
        assert_ne!(base, tape2.value(after.f_s).data());
    }
}
