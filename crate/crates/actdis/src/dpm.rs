//! Dynamic prompts: turn an action-specification vector into per-node
//! feature offsets.
//!
//! A bank of T candidate prompts is generated from the spec vector v alone.
//! Each node mixes the candidates with weights computed from v and its own
//! feature vector, so two nodes can extract different evidence for the same
//! specification. The mixed prompt is added to the node feature; padded
//! (masked) node slots stay exactly zero.

use gradtape::nn::{linear, mask_tensor};
use gradtape::{Tape64, TapeError, ValueId};

/// How candidate weights are squashed. `Softmax` makes the mixed prompt a
/// convex combination of the candidates (and the T = 1 case exactly the
/// single candidate); `Sigmoid` gates each candidate independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightActivation {
    #[default]
    Softmax,
    Sigmoid,
}

/// Tape handles for one prompt bank. SAP and UAP branches pass different
/// spec vectors through the same handles, so the parameters are shared.
#[derive(Debug, Clone, Copy)]
pub struct PromptBank {
    /// Candidate generator, `[C, T*D]` plus bias `[T*D]`.
    pub wq: ValueId,
    pub bq: ValueId,
    /// Spec projector into feature space, `[C, D]`.
    pub wy: ValueId,
    /// Weight head, `[D, T]`.
    pub ww: ValueId,
    pub t: usize,
    pub d: usize,
}

/// The T candidate prompts for one spec vector, `[T, D]`. Depends only on
/// `v`, never on node features.
pub fn candidates(tape: &mut Tape64, bank: &PromptBank, v: ValueId) -> Result<ValueId, TapeError> {
    let flat = linear(tape, v, bank.wq, Some(bank.bq))?;
    tape.reshape(flat, &[bank.t, bank.d])
}

/// Mixing weights for a single node feature `f_ij` (`[D]`): squash of
/// `ww^T (wy v + f_ij)`, length T.
pub fn prompt_weights(
    tape: &mut Tape64,
    bank: &PromptBank,
    act: WeightActivation,
    v: ValueId,
    f_ij: ValueId,
) -> Result<ValueId, TapeError> {
    let y = linear(tape, v, bank.wy, None)?;
    let z = tape.add(y, f_ij)?;
    let logits = linear(tape, z, bank.ww, None)?;
    match act {
        WeightActivation::Softmax => tape.softmax(logits),
        WeightActivation::Sigmoid => tape.sigmoid(logits),
    }
}

/// Add the mixed prompt to every unmasked node of `features` (`[N, M, D]`).
/// Computes all node weights in one batch; masked slots pass through as
/// zero. Returns `[N, M, D]`.
pub fn apply(
    tape: &mut Tape64,
    bank: &PromptBank,
    act: WeightActivation,
    features: ValueId,
    mask: &[bool],
    v: ValueId,
) -> Result<ValueId, TapeError> {
    let shape = tape.shape(features).to_vec();
    if shape.len() != 3 || shape[2] != bank.d {
        return Err(TapeError::Invalid {
            op: "prompt_apply",
            msg: format!("features must be [frames, nodes, {}], got {:?}", bank.d, shape),
        });
    }
    let (n, m, d) = (shape[0], shape[1], shape[2]);
    if mask.len() != n * m {
        return Err(TapeError::Invalid {
            op: "prompt_apply",
            msg: format!("mask length {} != {}x{}", mask.len(), n, m),
        });
    }
    let q = candidates(tape, bank, v)?;
    let y = linear(tape, v, bank.wy, None)?;
    let yb = tape.reshape(y, &[1, d])?;
    let yb = tape.broadcast(yb, &[n * m, d])?;
    let flat = tape.reshape(features, &[n * m, d])?;
    let z = tape.add(flat, yb)?;
    let logits = tape.matmul(z, bank.ww)?;
    let alpha = match act {
        WeightActivation::Softmax => tape.softmax(logits)?,
        WeightActivation::Sigmoid => tape.sigmoid(logits)?,
    };
    let prompts = tape.matmul(alpha, q)?;
    let mk = mask_tensor(tape, mask, &[n * m, 1])?;
    let mk = tape.broadcast(mk, &[n * m, d])?;
    let gated = tape.mul(prompts, mk)?;
    let out = tape.add(flat, gated)?;
    tape.reshape(out, &[n, m, d])
}

/// Static baseline behind the same interface: one projected prompt
/// `wp^T v` (`wp` is `[C, D]`) added to every unmasked node, ignoring node
/// features entirely.
pub fn apply_simple(
    tape: &mut Tape64,
    wp: ValueId,
    features: ValueId,
    mask: &[bool],
    v: ValueId,
) -> Result<ValueId, TapeError> {
    let shape = tape.shape(features).to_vec();
    if shape.len() != 3 {
        return Err(TapeError::Invalid {
            op: "prompt_apply",
            msg: format!("features must be rank 3, got {:?}", shape),
        });
    }
    let (n, m, d) = (shape[0], shape[1], shape[2]);
    let p = linear(tape, v, wp, None)?;
    let p = tape.reshape(p, &[1, 1, d])?;
    let p = tape.broadcast(p, &[n, m, d])?;
    let mk = mask_tensor(tape, mask, &[n, m, 1])?;
    let mk = tape.broadcast(mk, &[n, m, d])?;
    let gated = tape.mul(p, mk)?;
    tape.add(features, gated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use gradtape::{grad_check, ParamStore64, Tensor64};

    fn const_t(tape: &mut Tape64, shape: &[usize], data: &[f64]) -> ValueId {
        let t = Tensor64::from_f64(shape, data).unwrap();
        tape.constant(t).unwrap()
    }

    fn bank(tape: &mut Tape64, c: usize, t: usize, d: usize, wq: &[f64], bq: &[f64], wy: &[f64], ww: &[f64]) -> PromptBank {
        PromptBank {
            wq: const_t(tape, &[c, t * d], wq),
            bq: const_t(tape, &[t * d], bq),
            wy: const_t(tape, &[c, d], wy),
            ww: const_t(tape, &[d, t], ww),
            t,
            d,
        }
    }

    #[test]
    fn zero_spec_yields_bias_candidates() {
        let mut tape = Tape64::new();
        let b = bank(&mut tape, 3, 2, 2, &[0.3; 12], &[1.0, 2.0, 3.0, 4.0], &[0.0; 6], &[0.0; 4]);
        let v = const_t(&mut tape, &[3], &[0.0; 3]);
        let q = candidates(&mut tape, &b, v).unwrap();
        assert_eq!(tape.shape(q), &[2, 2]);
        assert_eq!(tape.value(q).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn identity_patterned_candidate_fixture() {
        // C=3, T=2, D=2: wq row r has a single 1 in column r (identity
        // pattern padded with zeros), bias 0. v=[5,6,7] -> flat [5,6,7,0]
        // -> rows [5,6] and [7,0].
        let mut tape = Tape64::new();
        #[rustfmt::skip]
        let wq = [
            1.0, 0.0, 0.0, 0.0,
            0.0, 1.0, 0.0, 0.0,
            0.0, 0.0, 1.0, 0.0,
        ];
        let b = bank(&mut tape, 3, 2, 2, &wq, &[0.0; 4], &[0.0; 6], &[0.0; 4]);
        let v = const_t(&mut tape, &[3], &[5.0, 6.0, 7.0]);
        let q = candidates(&mut tape, &b, v).unwrap();
        assert_eq!(tape.value(q).data(), &[5.0, 6.0, 7.0, 0.0]);
    }

    #[test]
    fn candidates_depend_only_on_projected_spec() {
        // Two different v with equal wq*v must give identical candidates.
        let mut tape = Tape64::new();
        #[rustfmt::skip]
        let wq = [
            1.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 0.0, // dead class: toggling it cannot matter
            0.0, 0.0, 1.0, 0.0,
        ];
        let b = bank(&mut tape, 3, 2, 2, &wq, &[0.5; 4], &[0.0; 6], &[0.0; 4]);
        let v1 = const_t(&mut tape, &[3], &[1.0, 0.0, 1.0]);
        let v2 = const_t(&mut tape, &[3], &[1.0, 1.0, 1.0]);
        let q1 = candidates(&mut tape, &b, v1).unwrap();
        let q2 = candidates(&mut tape, &b, v2).unwrap();
        assert_eq!(tape.value(q1).data(), tape.value(q2).data());
    }

    #[test]
    fn single_candidate_weight_is_one() {
        let mut tape = Tape64::new();
        let b = bank(&mut tape, 2, 1, 3, &[0.7; 6], &[0.1; 3], &[0.4; 6], &[2.0, -1.0, 0.3]);
        let v = const_t(&mut tape, &[2], &[1.0, 0.0]);
        let f = const_t(&mut tape, &[3], &[0.2, -0.5, 1.4]);
        let a = prompt_weights(&mut tape, &b, WeightActivation::Softmax, v, f).unwrap();
        assert_eq!(tape.value(a).data(), &[1.0]);
    }

    #[test]
    fn zero_weight_head_gives_uniform_weights() {
        let mut tape = Tape64::new();
        let b = bank(&mut tape, 2, 4, 2, &[0.7; 16], &[0.1; 8], &[0.4; 4], &[0.0; 8]);
        let v = const_t(&mut tape, &[2], &[1.0, 1.0]);
        let f = const_t(&mut tape, &[2], &[3.0, -2.0]);
        let a = prompt_weights(&mut tape, &b, WeightActivation::Softmax, v, f).unwrap();
        for &w in tape.value(a).data() {
            assert!((w - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn ln3_logit_gap_gives_three_to_one_weights() {
        // wy v + f = [1, 0]; ww = [[ln 3, 0], [0, 0]] -> logits [ln 3, 0].
        let mut tape = Tape64::new();
        let ln3 = 3.0f64.ln();
        let b = bank(&mut tape, 2, 2, 2, &[0.0; 8], &[0.0; 4], &[0.0; 4], &[ln3, 0.0, 0.0, 0.0]);
        let v = const_t(&mut tape, &[2], &[0.0, 0.0]);
        let f = const_t(&mut tape, &[2], &[1.0, 0.0]);
        let a = prompt_weights(&mut tape, &b, WeightActivation::Softmax, v, f).unwrap();
        let w = tape.value(a).data();
        assert!((w[0] - 0.75).abs() < 1e-12);
        assert!((w[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn zero_candidates_leave_features_unchanged() {
        let mut tape = Tape64::new();
        let b = bank(&mut tape, 2, 2, 2, &[0.0; 8], &[0.0; 4], &[0.3; 4], &[0.5; 4]);
        let feats = const_t(&mut tape, &[2, 2, 2], &[1.0, 2.0, 0.0, 0.0, 5.0, 6.0, 7.0, 8.0]);
        let v = const_t(&mut tape, &[2], &[1.0, 0.0]);
        let out = apply(&mut tape, &b, WeightActivation::Softmax, feats, &[true, false, true, true], v).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(feats).data());
    }

    #[test]
    fn single_candidate_adds_same_prompt_everywhere_and_skips_masked() {
        let mut tape = Tape64::new();
        // T=1: candidates = [bq] reshaped; every unmasked node gets +bq.
        let b = bank(&mut tape, 2, 1, 2, &[0.0; 4], &[10.0, 20.0], &[0.3; 4], &[0.5, 0.5]);
        let feats = const_t(&mut tape, &[1, 3, 2], &[1.0, 2.0, 3.0, 4.0, 0.0, 0.0]);
        let v = const_t(&mut tape, &[2], &[1.0, 1.0]);
        let out = apply(&mut tape, &b, WeightActivation::Softmax, feats, &[true, true, false], v).unwrap();
        assert_eq!(tape.value(out).data(), &[11.0, 22.0, 13.0, 24.0, 0.0, 0.0]);
    }

    #[test]
    fn identical_features_get_identical_prompts() {
        let mut tape = Tape64::new();
        let wq: Vec<f64> = (0..12).map(|i| (i as f64) * 0.17 - 0.9).collect();
        let b = bank(&mut tape, 3, 2, 2, &wq, &[0.2, -0.1, 0.4, 0.8], &[0.3; 6], &[0.5, -0.2, 0.1, 0.9]);
        let feats = const_t(&mut tape, &[1, 2, 2], &[0.6, -0.4, 0.6, -0.4]);
        let v = const_t(&mut tape, &[3], &[1.0, 0.0, 1.0]);
        let out = apply(&mut tape, &b, WeightActivation::Softmax, feats, &[true, true], v).unwrap();
        let data = tape.value(out).data();
        assert_eq!(&data[0..2], &data[2..4]);
    }

    #[test]
    fn mixed_prompt_stays_in_candidate_hull() {
        // Softmax weights keep each prompt coordinate within the candidate
        // range, so ||p||_inf <= max_t ||q_t||_inf.
        let mut tape = Tape64::new();
        let wq: Vec<f64> = (0..24).map(|i| ((i * 7 % 11) as f64) * 0.3 - 1.2).collect();
        let wy: Vec<f64> = (0..6).map(|i| (i as f64) * 0.1).collect();
        let ww: Vec<f64> = (0..8).map(|i| (i as f64) * 0.4 - 1.0).collect();
        let b = bank(&mut tape, 3, 4, 2, &wq, &[0.3; 8], &wy, &ww);
        let v = const_t(&mut tape, &[3], &[1.0, 1.0, 0.0]);
        let q = candidates(&mut tape, &b, v).unwrap();
        let qmax = tape.value(q).data().iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        let zero = const_t(&mut tape, &[1, 1, 2], &[0.0, 0.0]);
        let out = apply(&mut tape, &b, WeightActivation::Softmax, zero, &[true], v).unwrap();
        for &p in tape.value(out).data() {
            assert!(p.abs() <= qmax + 1e-12, "prompt {} outside hull bound {}", p, qmax);
        }
    }

    #[test]
    fn batched_apply_matches_per_node_path() {
        let mut tape = Tape64::new();
        let wq: Vec<f64> = (0..12).map(|i| (i as f64) * 0.13 - 0.7).collect();
        let wy: Vec<f64> = (0..6).map(|i| (i as f64) * 0.21 - 0.5).collect();
        let ww: Vec<f64> = (0..4).map(|i| (i as f64) * 0.33 - 0.4).collect();
        let b = bank(&mut tape, 3, 2, 2, &wq, &[0.1, 0.2, 0.3, 0.4], &wy, &ww);
        let v = const_t(&mut tape, &[3], &[0.0, 1.0, 1.0]);
        let feats = const_t(&mut tape, &[1, 2, 2], &[0.5, -0.3, 1.1, 0.7]);
        let out = apply(&mut tape, &b, WeightActivation::Softmax, feats, &[true, true], v).unwrap();
        let q = candidates(&mut tape, &b, v).unwrap();
        for node in 0..2 {
            let slice = tape.value(feats).data()[2 * node..2 * node + 2].to_vec();
            let f = const_t(&mut tape, &[2], &slice);
            let a = prompt_weights(&mut tape, &b, WeightActivation::Softmax, v, f).unwrap();
            let arow = tape.reshape(a, &[1, 2]).unwrap();
            let p = tape.matmul(arow, q).unwrap();
            let want = tape.value(p).data();
            let got = tape.value(out).data();
            for k in 0..2 {
                let f_in = tape.value(feats).data()[2 * node + k];
                assert!((got[2 * node + k] - (f_in + want[k])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sigmoid_activation_gates_independently() {
        let mut tape = Tape64::new();
        let b = bank(&mut tape, 2, 2, 2, &[0.7; 8], &[0.1; 4], &[0.0; 4], &[0.0; 4]);
        let v = const_t(&mut tape, &[2], &[1.0, 0.0]);
        let f = const_t(&mut tape, &[2], &[0.0, 0.0]);
        let a = prompt_weights(&mut tape, &b, WeightActivation::Sigmoid, v, f).unwrap();
        // Zero logits -> each gate is 0.5; they do not sum to 1.
        assert_eq!(tape.value(a).data(), &[0.5, 0.5]);
    }

    #[test]
    fn simple_prompt_adds_one_static_offset() {
        let mut tape = Tape64::new();
        let wp = const_t(&mut tape, &[2, 2], &[1.0, 2.0, 10.0, 20.0]);
        let feats = const_t(&mut tape, &[1, 2, 2], &[0.5, 0.5, 0.0, 0.0]);
        let v = const_t(&mut tape, &[2], &[1.0, 1.0]);
        let out = apply_simple(&mut tape, wp, feats, &[true, false], v).unwrap();
        assert_eq!(tape.value(out).data(), &[11.5, 22.5, 0.0, 0.0]);
    }

    #[test]
    fn gradients_reach_all_bank_parameters() {
        let (c, t, d) = (3, 2, 2);
        let mut store = ParamStore64::new();
        let mk = |shape: &[usize], scale: f64| {
            let vals: Vec<f64> = (0..shape.iter().product::<usize>())
                .map(|i| ((i * 13 % 7) as f64 - 3.0) * scale)
                .collect();
            Tensor64::from_f64(shape, &vals).unwrap()
        };
        let pwq = store.add("wq", mk(&[c, t * d], 0.2), true).unwrap();
        let pbq = store.add("bq", mk(&[t * d], 0.1), true).unwrap();
        let pwy = store.add("wy", mk(&[c, d], 0.15), true).unwrap();
        let pww = store.add("ww", mk(&[d, t], 0.25), true).unwrap();
        let report = grad_check(&mut store, 1e-5, 1e-6, |tape, binds| {
            let b = PromptBank {
                wq: binds.id(pwq),
                bq: binds.id(pbq),
                wy: binds.id(pwy),
                ww: binds.id(pww),
                t,
                d,
            };
            let feats = tape
                .constant(Tensor64::from_f64(&[1, 2, 2], &[0.4, -0.2, 0.9, 0.3]).unwrap())?;
            let v = tape.constant(Tensor64::from_f64(&[3], &[1.0, 0.0, 1.0]).unwrap())?;
            let out = apply(tape, &b, WeightActivation::Softmax, feats, &[true, true], v)?;
            let sq = tape.mul(out, out)?;
            tape.sum_all(sq)
        })
        .unwrap();
        assert!(report.pass, "{}", report);
        assert_eq!(report.entries.len(), 4);
    }
}
