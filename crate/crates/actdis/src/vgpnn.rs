//! Graph-network layers over spatio-temporal scene graphs.
//!
//! Each layer runs three steps followed by a normalizer:
//! - link: temporal self-attention over every ordered node pair's edge
//!   series, so edges see their own history;
//! - message: per-edge gated messages (gate from the edge, content from the
//!   source node and the edge), summed at the destination node;
//! - update: residual add of the aggregated message and an affine fusion of
//!   (updated, original) node features;
//! - frame normalization against a momentum-tracked global per-frame mean
//!   with a learnable mean scale and affine parameters.
//!
//! A masked-softmax readout turns node features into per-frame weights, a
//! frame embedding, sigmoid frame scores, and one global vector.
//!
//! All steps preserve masking exactly: padded node slots and absent pairs
//! are zero at every step's output.

use crate::ssg::SceneGraphSequence;
use gradtape::nn::{linear, mask_tensor, mlp2, self_attention, AttnParams};
use gradtape::{Tape64, TapeError, Tensor64, ValueId};

/// Edge features for all `P = M*M` ordered node pairs per frame.
/// `pair_mask` is row-major `(frame, pair)` with `pair = src*M + dst`; a
/// pair is live iff at least one relation connects it in that frame (the
/// dataset layer guarantees live pairs have unmasked endpoints and
/// `src != dst`). Dead pairs carry exactly zero features.
pub struct EdgeTensor {
    pub values: ValueId,
    pub pair_mask: Vec<bool>,
    pub frames: usize,
    pub nodes: usize,
    pub dim: usize,
}

impl EdgeTensor {
    pub fn pairs(&self) -> usize {
        self.nodes * self.nodes
    }
}

/// Build edge features from a sequence: each live pair sums the embeddings
/// of its present relation types (one row of a 0/1 incidence matrix times
/// the embedding table, so gradients reach the table).
pub fn edge_features(
    tape: &mut Tape64,
    seq: &SceneGraphSequence,
    table: ValueId,
) -> Result<EdgeTensor, TapeError> {
    let ts = tape.shape(table).to_vec();
    if ts.len() != 2 {
        return Err(TapeError::Invalid {
            op: "edge_features",
            msg: format!("embedding table must be [types, dim], got {:?}", ts),
        });
    }
    let (r, de) = (ts[0], ts[1]);
    let (n, m) = (seq.num_frames, seq.max_nodes);
    let p = m * m;
    let mut incidence = vec![0.0f64; n * p * r];
    let mut pair_mask = vec![false; n * p];
    for rel in &seq.relations {
        if rel.rel as usize >= r {
            return Err(TapeError::Invalid {
                op: "edge_features",
                msg: format!("relation type {} outside table of {} types", rel.rel, r),
            });
        }
        let pair = rel.src * m + rel.dst;
        incidence[(rel.frame * p + pair) * r + rel.rel as usize] = 1.0;
        pair_mask[rel.frame * p + pair] = true;
    }
    let inc = tape.constant(Tensor64::from_f64(&[n * p, r], &incidence).unwrap())?;
    let flat = tape.matmul(inc, table)?;
    let values = tape.reshape(flat, &[n, p, de])?;
    Ok(EdgeTensor { values, pair_mask, frames: n, nodes: m, dim: de })
}

/// Temporal self-attention over each pair's edge series (single head,
/// residual). Frames where the pair is dead are excluded from attention and
/// zeroed in the output; a pair dead at every frame passes through as zeros.
pub fn link(tape: &mut Tape64, edges: &EdgeTensor, p: &AttnParams) -> Result<EdgeTensor, TapeError> {
    let (n, pairs) = (edges.frames, edges.pairs());
    let x = tape.permute(edges.values, &[1, 0, 2])?;
    let mut valid = vec![false; pairs * n];
    for i in 0..n {
        for pr in 0..pairs {
            valid[pr * n + i] = edges.pair_mask[i * pairs + pr];
        }
    }
    let y = self_attention(tape, x, &valid, p)?;
    let values = tape.permute(y, &[1, 0, 2])?;
    Ok(EdgeTensor {
        values,
        pair_mask: edges.pair_mask.clone(),
        frames: n,
        nodes: edges.nodes,
        dim: edges.dim,
    })
}

/// Message-step parameters: content projection `[D+De, D]` (+bias) and the
/// gate MLP `De -> H -> D` whose sigmoid output gates each message channel.
#[derive(Debug, Clone, Copy)]
pub struct MessageParams {
    pub proj_w: ValueId,
    pub proj_b: ValueId,
    pub gate_w1: ValueId,
    pub gate_b1: ValueId,
    pub gate_w2: ValueId,
    pub gate_b2: ValueId,
}

/// Gated messages summed at each destination node. Per live edge
/// `(frame i, src j -> dst k)`: content = proj(concat(f_i^j, e_i^{j,k})),
/// gate = sigmoid(gate_mlp(e_i^{j,k})), contribution = gate * content.
/// Dead pairs contribute exactly zero. Returns `[N, M, D]`.
pub fn message(
    tape: &mut Tape64,
    nodes: ValueId,
    edges: &EdgeTensor,
    p: &MessageParams,
) -> Result<ValueId, TapeError> {
    let ns = tape.shape(nodes).to_vec();
    if ns.len() != 3 || ns[0] != edges.frames || ns[1] != edges.nodes {
        return Err(TapeError::Invalid {
            op: "message",
            msg: format!(
                "nodes {:?} incompatible with edges over {} frames x {} nodes",
                ns, edges.frames, edges.nodes
            ),
        });
    }
    let (n, m, d) = (ns[0], ns[1], ns[2]);
    let pairs = edges.pairs();
    let src_idx: Vec<usize> = (0..pairs).map(|pr| pr / m).collect();
    let f_src = tape.gather(nodes, 1, &src_idx)?;
    let cat = tape.concat(&[f_src, edges.values], 2)?;
    let content = linear(tape, cat, p.proj_w, Some(p.proj_b))?;
    let gate_pre = mlp2(tape, edges.values, p.gate_w1, p.gate_b1, p.gate_w2, p.gate_b2)?;
    let gate = tape.sigmoid(gate_pre)?;
    let gated = tape.mul(gate, content)?;
    let mk = mask_tensor(tape, &edges.pair_mask, &[n, pairs, 1])?;
    let mk = tape.broadcast(mk, &[n, pairs, d])?;
    let contrib = tape.mul(gated, mk)?;
    let by_pair = tape.reshape(contrib, &[n, m, m, d])?;
    let summed = tape.sum_axes(by_pair, &[1])?;
    tape.reshape(summed, &[n, m, d])
}

/// Update-step parameters: the fusion map `[2D, D]` (+bias) applied to
/// `concat(f + msg, f)`.
#[derive(Debug, Clone, Copy)]
pub struct UpdateParams {
    pub fuse_w: ValueId,
    pub fuse_b: ValueId,
}

/// Fusion weights that emit the first argument (`f + msg`) exactly, making
/// a freshly initialized layer the identity when messages are zero.
pub fn identity_fuse_weights(d: usize) -> Tensor64 {
    let mut w = vec![0.0f64; 2 * d * d];
    for i in 0..d {
        w[i * d + i] = 1.0;
    }
    Tensor64::from_f64(&[2 * d, d], &w).unwrap()
}

/// Residual update: `u = f + msg`, then an affine fusion of `concat(u, f)`.
/// Masked node slots come out exactly zero.
pub fn update(
    tape: &mut Tape64,
    nodes: ValueId,
    messages: ValueId,
    node_mask: &[bool],
    p: &UpdateParams,
) -> Result<ValueId, TapeError> {
    let ns = tape.shape(nodes).to_vec();
    let (n, m, d) = (ns[0], ns[1], ns[2]);
    let u = tape.add(nodes, messages)?;
    let cat = tape.concat(&[u, nodes], 2)?;
    let fused = linear(tape, cat, p.fuse_w, Some(p.fuse_b))?;
    let mk = mask_tensor(tape, node_mask, &[n, m, 1])?;
    let mk = tape.broadcast(mk, &[n, m, d])?;
    tape.mul(fused, mk)
}

/// Learnable normalizer parameters, one value per frame index.
#[derive(Debug, Clone, Copy)]
pub struct NormParams {
    /// Scale on the tracked global mean.
    pub alpha: ValueId,
    /// Affine scale and shift on the normalized output.
    pub gamma: ValueId,
    pub beta: ValueId,
}

/// Frame normalization over a `[B, N, M, D]` batch against the tracked
/// per-frame global mean `mu_g`.
///
/// In training mode the batch's mask-aware per-frame mean `mu` first folds
/// into the running mean (`mu_g <- momentum*mu_g + (1-momentum)*mu`) and the
/// updated value is used immediately; in eval mode `mu_g` is used as is.
/// Either way each (video, frame) is centered by `alpha_n * mu_g_n`, scaled
/// by its own Bessel-corrected deviation over unmasked entries, and mapped
/// through `gamma, beta`. Returns the output and the `mu_g` in effect, which
/// the caller owns committing. The running mean is treated as data, not a
/// differentiable input.
pub fn vgnorm(
    tape: &mut Tape64,
    features: ValueId,
    mask: &[bool],
    p: &NormParams,
    mu_g: &[f64],
    momentum: f64,
    eps: f64,
    training: bool,
) -> Result<(ValueId, Vec<f64>), TapeError> {
    let fs = tape.shape(features).to_vec();
    if fs.len() != 4 {
        return Err(TapeError::Invalid {
            op: "vgnorm",
            msg: format!("features must be [batch, frames, nodes, dim], got {:?}", fs),
        });
    }
    let (b, n, m, d) = (fs[0], fs[1], fs[2], fs[3]);
    if mask.len() != b * n * m || mu_g.len() != n {
        return Err(TapeError::Invalid {
            op: "vgnorm",
            msg: format!(
                "mask length {} (want {}) or mean length {} (want {})",
                mask.len(),
                b * n * m,
                mu_g.len(),
                n
            ),
        });
    }
    // Per-(video, frame) unmasked sample counts; each unmasked node
    // contributes D samples.
    let mut counts = vec![0usize; b * n];
    for bi in 0..b {
        for i in 0..n {
            let nodes = (0..m).filter(|&j| mask[(bi * n + i) * m + j]).count();
            counts[bi * n + i] = nodes * d;
        }
    }
    if let Some(idx) = counts.iter().position(|&c| c < 2) {
        return Err(TapeError::Invalid {
            op: "vgnorm",
            msg: format!(
                "frame {} of video {} has {} unmasked samples; need at least 2",
                idx % n,
                idx / n,
                counts[idx]
            ),
        });
    }
    let effective: Vec<f64> = if training {
        let data = tape.value(features).data();
        let mut sums = vec![0.0f64; n];
        let mut totals = vec![0usize; n];
        for bi in 0..b {
            for i in 0..n {
                for j in 0..m {
                    if mask[(bi * n + i) * m + j] {
                        let base = ((bi * n + i) * m + j) * d;
                        sums[i] += data[base..base + d].iter().sum::<f64>();
                        totals[i] += d;
                    }
                }
            }
        }
        (0..n)
            .map(|i| {
                let mu = sums[i] / totals[i] as f64;
                momentum * mu_g[i] + (1.0 - momentum) * mu
            })
            .collect()
    } else {
        mu_g.to_vec()
    };

    let mu = tape.constant(Tensor64::from_f64(&[n], &effective).unwrap())?;
    let centered_mean = tape.mul(p.alpha, mu)?;
    let cm = tape.reshape(centered_mean, &[1, n, 1, 1])?;
    let cm = tape.broadcast(cm, &[b, n, m, d])?;
    let dev_all = tape.sub(features, cm)?;
    let mk = mask_tensor(tape, mask, &[b, n, m, 1])?;
    let mkb = tape.broadcast(mk, &[b, n, m, d])?;
    let dev = tape.mul(dev_all, mkb)?;
    let sq = tape.mul(dev, dev)?;
    let var_sum = tape.sum_axes(sq, &[2, 3])?;
    let bessel: Vec<f64> = counts.iter().map(|&c| (c - 1) as f64).collect();
    let bessel = tape.constant(Tensor64::from_f64(&[b, n, 1, 1], &bessel).unwrap())?;
    let var = tape.div(var_sum, bessel)?;
    let var_eps = tape.add_const(var, eps)?;
    let denom = tape.sqrt(var_eps)?;
    let denom = tape.broadcast(denom, &[b, n, m, d])?;
    let normalized = tape.div(dev, denom)?;
    let gm = tape.reshape(p.gamma, &[1, n, 1, 1])?;
    let gm = tape.broadcast(gm, &[b, n, m, d])?;
    let bt = tape.reshape(p.beta, &[1, n, 1, 1])?;
    let bt = tape.broadcast(bt, &[b, n, m, d])?;
    let scaled = tape.mul(normalized, gm)?;
    let shifted = tape.add(scaled, bt)?;
    let out = tape.mul(shifted, mkb)?;
    Ok((out, effective))
}

/// Readout parameters: node-score MLP `D -> H -> 1` and frame-score MLP
/// `D -> H -> 1`.
#[derive(Debug, Clone, Copy)]
pub struct ReadoutParams {
    pub node_w1: ValueId,
    pub node_b1: ValueId,
    pub node_w2: ValueId,
    pub node_b2: ValueId,
    pub frame_w1: ValueId,
    pub frame_b1: ValueId,
    pub frame_w2: ValueId,
    pub frame_b2: ValueId,
}

/// Readout products: one global vector, per-frame sigmoid scores (the
/// localization signal), and per-frame node weight rows that sum to 1 over
/// unmasked nodes.
pub struct Readout {
    pub global: ValueId,
    pub frame_weights: ValueId,
    pub node_weights: ValueId,
}

/// Aggregate `[N, M, D]` features: masked softmax over nodes per frame,
/// weighted frame embeddings `h_i`, sigmoid frame scores `s_i`, and
/// `global = sum_i s_i h_i / (sum_i s_i + eps)`.
pub fn readout(
    tape: &mut Tape64,
    features: ValueId,
    mask: &[bool],
    p: &ReadoutParams,
    eps: f64,
) -> Result<Readout, TapeError> {
    let fs = tape.shape(features).to_vec();
    if fs.len() != 3 {
        return Err(TapeError::Invalid {
            op: "readout",
            msg: format!("features must be [frames, nodes, dim], got {:?}", fs),
        });
    }
    let (n, m, d) = (fs[0], fs[1], fs[2]);
    let scores = mlp2(tape, features, p.node_w1, p.node_b1, p.node_w2, p.node_b2)?;
    let scores = tape.reshape(scores, &[n, m])?;
    let node_weights = tape.masked_softmax(scores, mask)?;
    let w = tape.reshape(node_weights, &[n, m, 1])?;
    let w = tape.broadcast(w, &[n, m, d])?;
    let weighted = tape.mul(features, w)?;
    let h = tape.sum_axes(weighted, &[1])?;
    let h = tape.reshape(h, &[n, d])?;
    let s_pre = mlp2(tape, h, p.frame_w1, p.frame_b1, p.frame_w2, p.frame_b2)?;
    let s_pre = tape.reshape(s_pre, &[n])?;
    let s = tape.sigmoid(s_pre)?;
    let sb = tape.reshape(s, &[n, 1])?;
    let sb = tape.broadcast(sb, &[n, d])?;
    let sh = tape.mul(h, sb)?;
    let num = tape.sum_axes(sh, &[0])?;
    let num = tape.reshape(num, &[d])?;
    let total = tape.sum_all(s)?;
    let total = tape.add_const(total, eps)?;
    let total = tape.reshape(total, &[1])?;
    let total = tape.broadcast(total, &[d])?;
    let global = tape.div(num, total)?;
    Ok(Readout { global, frame_weights: s, node_weights })
}

/// One full layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerParams {
    pub link: AttnParams,
    pub msg: MessageParams,
    pub upd: UpdateParams,
    pub norm: NormParams,
}

/// Run the link step of every layer once, yielding the edge tensor each
/// layer's message step consumes. Edges never read node features, so two
/// branches over the same video can share one stream.
pub fn edge_stream(
    tape: &mut Tape64,
    edges: &EdgeTensor,
    layers: &[LayerParams],
) -> Result<Vec<EdgeTensor>, TapeError> {
    let mut out = Vec::with_capacity(layers.len());
    let mut current = link(tape, edges, &layers[0].link)?;
    for layer in &layers[1..] {
        let next = link(tape, &current, &layer.link)?;
        out.push(current);
        current = next;
    }
    out.push(current);
    Ok(out)
}

/// Node-stream pass over a precomputed edge stream: per layer, message ->
/// update -> normalize. `mu_g[l]` is layer l's tracked mean; the returned
/// per-layer means mirror [`vgnorm`]'s contract (updated in training mode,
/// caller commits).
pub fn node_stream(
    tape: &mut Tape64,
    prompted: ValueId,
    linked: &[EdgeTensor],
    node_mask: &[bool],
    layers: &[LayerParams],
    mu_g: &[Vec<f64>],
    momentum: f64,
    eps: f64,
    training: bool,
) -> Result<(ValueId, Vec<Vec<f64>>), TapeError> {
    if layers.is_empty() || layers.len() != linked.len() || layers.len() != mu_g.len() {
        return Err(TapeError::Invalid {
            op: "vgpnn",
            msg: format!(
                "{} layers, {} edge tensors, {} mean states",
                layers.len(),
                linked.len(),
                mu_g.len()
            ),
        });
    }
    let shape = tape.shape(prompted).to_vec();
    let (n, m, d) = (shape[0], shape[1], shape[2]);
    let mut f = prompted;
    let mut means = Vec::with_capacity(layers.len());
    for (l, layer) in layers.iter().enumerate() {
        let msg = message(tape, f, &linked[l], &layer.msg)?;
        let upd = update(tape, f, msg, node_mask, &layer.upd)?;
        let batched = tape.reshape(upd, &[1, n, m, d])?;
        let (normed, new_mu) =
            vgnorm(tape, batched, node_mask, &layer.norm, &mu_g[l], momentum, eps, training)?;
        f = tape.reshape(normed, &[n, m, d])?;
        means.push(new_mu);
    }
    Ok((f, means))
}

/// Full pass: link/message/update/normalize for every layer.
#[allow(clippy::too_many_arguments)]
pub fn vgpnn_forward(
    tape: &mut Tape64,
    prompted: ValueId,
    edges: &EdgeTensor,
    node_mask: &[bool],
    layers: &[LayerParams],
    mu_g: &[Vec<f64>],
    momentum: f64,
    eps: f64,
    training: bool,
) -> Result<(ValueId, Vec<Vec<f64>>), TapeError> {
    let linked = edge_stream(tape, edges, layers)?;
    node_stream(tape, prompted, &linked, node_mask, layers, mu_g, momentum, eps, training)
}
