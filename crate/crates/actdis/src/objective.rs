//! Training objective: margin-relaxed decorrelation between the two
//! disentangled feature tensors, margin-relaxed reconstruction of the
//! original features through a learned fusion, and per-head classification
//! losses combined with fixed weights.

use gradtape::nn::mlp2;
use gradtape::{Tape64, TapeError, Tensor64, ValueId};

/// Loss weights and margins.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub m1: f64,
    pub m2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 1.0, lambda2: 1.0, lambda3: 1.0, lambda4: 0.5, m1: 0.1, m2: 0.01 }
    }
}

/// Expand a per-position mask to one flag per tensor element.
pub fn expand_mask(mask: &[bool], dim: usize) -> Vec<bool> {
    mask.iter().flat_map(|&m| std::iter::repeat(m).take(dim)).collect()
}

fn masked_sum(tape: &mut Tape64, x: ValueId, mask: Option<ValueId>) -> Result<ValueId, TapeError> {
    let v = match mask {
        Some(m) => tape.mul(x, m)?,
        None => x,
    };
    tape.sum_all(v)
}

/// Pearson correlation between the unmasked entries of two same-shape
/// tensors, as a tape scalar. Returns `(rho, zero_variance)`; when either
/// side has (numerically) zero variance the correlation is pinned to the
/// constant 0 instead of producing NaN, and the flag is set so callers can
/// log the event.
pub fn pearson(
    tape: &mut Tape64,
    a: ValueId,
    b: ValueId,
    mask: Option<&[bool]>,
) -> Result<(ValueId, bool), TapeError> {
    if tape.shape(a) != tape.shape(b) {
        return Err(TapeError::ShapeMismatch {
            op: "pearson",
            lhs: tape.shape(a).to_vec(),
            rhs: tape.shape(b).to_vec(),
        });
    }
    let numel = tape.value(a).numel();
    let count = match mask {
        Some(m) => {
            if m.len() != numel {
                return Err(TapeError::Invalid {
                    op: "pearson",
                    msg: format!("mask length {} != element count {}", m.len(), numel),
                });
            }
            m.iter().filter(|&&x| x).count()
        }
        None => numel,
    };
    if count < 2 {
        return Err(TapeError::Invalid {
            op: "pearson",
            msg: format!("{} unmasked samples; need at least 2", count),
        });
    }
    let shape = tape.shape(a).to_vec();
    let mask_id = match mask {
        Some(m) => {
            let data: Vec<f64> = m.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect();
            Some(tape.constant(Tensor64::from_f64(&shape, &data).unwrap())?)
        }
        None => None,
    };
    let inv = 1.0 / count as f64;
    let center = |tape: &mut Tape64, x: ValueId| -> Result<ValueId, TapeError> {
        let s = masked_sum(tape, x, mask_id)?;
        let mean = tape.scale(s, inv)?;
        let mean = tape.reshape(mean, &vec![1; shape.len()])?;
        let mean = tape.broadcast(mean, &shape)?;
        let dev = tape.sub(x, mean)?;
        match mask_id {
            Some(m) => tape.mul(dev, m),
            None => Ok(dev),
        }
    };
    let da = center(tape, a)?;
    let db = center(tape, b)?;
    let prod = tape.mul(da, db)?;
    let cov = tape.sum_all(prod)?;
    let sa = tape.mul(da, da)?;
    let va = tape.sum_all(sa)?;
    let sb = tape.mul(db, db)?;
    let vb = tape.sum_all(sb)?;
    let tiny = 1e-24;
    if tape.value(va).item().abs() < tiny || tape.value(vb).item().abs() < tiny {
        let zero = tape.scalar_const(0.0)?;
        return Ok((zero, true));
    }
    let vv = tape.mul(va, vb)?;
    let denom = tape.sqrt(vv)?;
    let rho = tape.div(cov, denom)?;
    Ok((rho, false))
}

/// One video's decorrelation term: `relu(|rho| - m1)`.
pub fn disentangle_term(
    tape: &mut Tape64,
    f_u: ValueId,
    f_s: ValueId,
    mask: Option<&[bool]>,
    m1: f64,
) -> Result<(ValueId, bool), TapeError> {
    let (rho, degenerate) = pearson(tape, f_u, f_s, mask)?;
    let mag = tape.abs(rho)?;
    let shifted = tape.add_const(mag, -m1)?;
    let term = tape.relu(shifted)?;
    Ok((term, degenerate))
}

/// Batch decorrelation loss: mean over videos of [`disentangle_term`].
/// Returns the loss and how many videos hit the zero-variance guard.
pub fn disentangle_loss(
    tape: &mut Tape64,
    pairs: &[(ValueId, ValueId)],
    masks: &[Option<&[bool]>],
    m1: f64,
) -> Result<(ValueId, usize), TapeError> {
    if pairs.is_empty() || pairs.len() != masks.len() {
        return Err(TapeError::Invalid {
            op: "disentangle_loss",
            msg: format!("{} pairs with {} masks", pairs.len(), masks.len()),
        });
    }
    let mut total: Option<ValueId> = None;
    let mut degenerates = 0usize;
    for (&(f_u, f_s), &mask) in pairs.iter().zip(masks.iter()) {
        let (term, degenerate) = disentangle_term(tape, f_u, f_s, mask, m1)?;
        degenerates += usize::from(degenerate);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    let mean = tape.scale(total.unwrap(), 1.0 / pairs.len() as f64)?;
    Ok((mean, degenerates))
}

/// Fusion networks: a per-position fusion-weight head (`2D -> H -> 1`,
/// sigmoid) and a per-position reconstruction map realized as a residual
/// MLP `x + mlp(x)` so zero-initialized inner weights start it at identity.
#[derive(Debug, Clone, Copy)]
pub struct FusionNets {
    pub net1_w1: ValueId,
    pub net1_b1: ValueId,
    pub net1_w2: ValueId,
    pub net1_b2: ValueId,
    pub net2_w1: ValueId,
    pub net2_b1: ValueId,
    pub net2_w2: ValueId,
    pub net2_b2: ValueId,
}

/// Blend the two branch tensors with a learned per-position weight and map
/// the blend back toward the original feature space:
/// `delta = sigmoid(net2(concat(F_u, F_s)))`, `F_r = net1(delta*F_u +
/// (1-delta)*F_s)`. Masked positions are zeroed. Returns `(F_r, delta)`
/// with `delta` shaped `[N, M]`.
pub fn reconstruct(
    tape: &mut Tape64,
    f_u: ValueId,
    f_s: ValueId,
    mask: &[bool],
    nets: &FusionNets,
) -> Result<(ValueId, ValueId), TapeError> {
    let shape = tape.shape(f_u).to_vec();
    if shape.len() != 3 {
        return Err(TapeError::Invalid {
            op: "reconstruct",
            msg: format!("features must be [frames, nodes, dim], got {:?}", shape),
        });
    }
    let (n, m, d) = (shape[0], shape[1], shape[2]);
    let cat = tape.concat(&[f_u, f_s], 2)?;
    let dpre = mlp2(tape, cat, nets.net2_w1, nets.net2_b1, nets.net2_w2, nets.net2_b2)?;
    let dpre = tape.reshape(dpre, &[n, m])?;
    let delta = tape.sigmoid(dpre)?;
    let db = tape.reshape(delta, &[n, m, 1])?;
    let db = tape.broadcast(db, &[n, m, d])?;
    let wu = tape.mul(db, f_u)?;
    let ones = tape.constant(Tensor64::full(&[n, m, d], 1.0))?;
    let inv = tape.sub(ones, db)?;
    let ws = tape.mul(inv, f_s)?;
    let mix = tape.add(wu, ws)?;
    let res = mlp2(tape, mix, nets.net1_w1, nets.net1_b1, nets.net1_w2, nets.net1_b2)?;
    let f_r = tape.add(mix, res)?;
    let mk = gradtape::nn::mask_tensor(tape, mask, &[n, m, 1])?;
    let mk = tape.broadcast(mk, &[n, m, d])?;
    let f_r = tape.mul(f_r, mk)?;
    Ok((f_r, delta))
}

/// One video's reconstruction term: `relu(mse - m2)` where the MSE runs
/// over unmasked entries only.
pub fn reconstruction_term(
    tape: &mut Tape64,
    f_o: ValueId,
    f_r: ValueId,
    mask: &[bool],
    m2: f64,
) -> Result<ValueId, TapeError> {
    let shape = tape.shape(f_o).to_vec();
    let numel = tape.value(f_o).numel();
    let d = *shape.last().unwrap_or(&1);
    let elems = expand_mask(mask, d);
    if elems.len() != numel {
        return Err(TapeError::Invalid {
            op: "reconstruction_term",
            msg: format!("mask covers {} elements, tensor has {}", elems.len(), numel),
        });
    }
    let count = elems.iter().filter(|&&x| x).count();
    if count == 0 {
        return Err(TapeError::Invalid { op: "reconstruction_term", msg: "empty mask".into() });
    }
    let diff = tape.sub(f_o, f_r)?;
    let mdata: Vec<f64> = elems.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect();
    let mk = tape.constant(Tensor64::from_f64(&shape, &mdata).unwrap())?;
    let diff = tape.mul(diff, mk)?;
    let sq = tape.mul(diff, diff)?;
    let sum = tape.sum_all(sq)?;
    let mse = tape.scale(sum, 1.0 / count as f64)?;
    let shifted = tape.add_const(mse, -m2)?;
    tape.relu(shifted)
}

/// Batch reconstruction loss: mean over videos of [`reconstruction_term`].
pub fn reconstruction_loss(
    tape: &mut Tape64,
    pairs: &[(ValueId, ValueId)],
    masks: &[&[bool]],
    m2: f64,
) -> Result<ValueId, TapeError> {
    if pairs.is_empty() || pairs.len() != masks.len() {
        return Err(TapeError::Invalid {
            op: "reconstruction_loss",
            msg: format!("{} pairs with {} masks", pairs.len(), masks.len()),
        });
    }
    let mut total: Option<ValueId> = None;
    for (&(f_o, f_r), &mask) in pairs.iter().zip(masks.iter()) {
        let term = reconstruction_term(tape, f_o, f_r, mask, m2)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    tape.scale(total.unwrap(), 1.0 / pairs.len() as f64)
}

/// Mean binary cross-entropy over one head's logit vector. Targets must be
/// exactly 0 or 1.
pub fn bce_head(tape: &mut Tape64, logits: ValueId, targets: &[u8]) -> Result<ValueId, TapeError> {
    if targets.iter().any(|&y| y > 1) {
        return Err(TapeError::Invalid {
            op: "bce_head",
            msg: "targets must be exactly 0 or 1".into(),
        });
    }
    let shape = tape.shape(logits).to_vec();
    let t: Vec<f64> = targets.iter().map(|&y| f64::from(y)).collect();
    let t = Tensor64::from_f64(&shape, &t).map_err(|e| TapeError::Invalid {
        op: "bce_head",
        msg: e.to_string(),
    })?;
    let per = tape.bce_with_logits(logits, &t)?;
    tape.mean_all(per)
}

/// All scalar pieces of one training step's objective.
pub struct LossBreakdown {
    pub bce_u: ValueId,
    pub bce_s: ValueId,
    pub bce_t: ValueId,
    pub dis: ValueId,
    pub rec: ValueId,
    pub total: ValueId,
}

/// `lambda1*bce_u + lambda2*bce_s + lambda3*bce_t + lambda4*(dis + rec)`.
pub fn combine(
    tape: &mut Tape64,
    bce_u: ValueId,
    bce_s: ValueId,
    bce_t: ValueId,
    dis: ValueId,
    rec: ValueId,
    w: &LossWeights,
) -> Result<ValueId, TapeError> {
    let t1 = tape.scale(bce_u, w.lambda1)?;
    let t2 = tape.scale(bce_s, w.lambda2)?;
    let t3 = tape.scale(bce_t, w.lambda3)?;
    let dr = tape.add(dis, rec)?;
    let t4 = tape.scale(dr, w.lambda4)?;
    let a = tape.add(t1, t2)?;
    let b = tape.add(a, t3)?;
    tape.add(b, t4)
}

/// Classification losses for the three logit heads plus precomputed
/// decorrelation and reconstruction scalars, combined per [`combine`].
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape64,
    a_u: ValueId,
    y_u: &[u8],
    a_s: ValueId,
    y_s: &[u8],
    a_t: ValueId,
    y_t: &[u8],
    dis: ValueId,
    rec: ValueId,
    w: &LossWeights,
) -> Result<LossBreakdown, TapeError> {
    let bce_u = bce_head(tape, a_u, y_u)?;
    let bce_s = bce_head(tape, a_s, y_s)?;
    let bce_t = bce_head(tape, a_t, y_t)?;
    let total = combine(tape, bce_u, bce_s, bce_t, dis, rec, w)?;
    Ok(LossBreakdown { bce_u, bce_s, bce_t, dis, rec, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use gradtape::{grad_check, ParamStore64};

    fn const_t(tape: &mut Tape64, shape: &[usize], data: &[f64]) -> ValueId {
        tape.constant(Tensor64::from_f64(shape, data).unwrap()).unwrap()
    }

    #[test]
    fn identical_inputs_pay_one_minus_margin() {
        let mut tape = Tape64::new();
        let x = const_t(&mut tape, &[4], &[0.3, -1.2, 2.0, 0.5]);
        let (term, degenerate) = disentangle_term(&mut tape, x, x, None, 0.1).unwrap();
        assert!(!degenerate);
        assert!((tape.value(term).item() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn positive_affine_transform_keeps_full_correlation() {
        let mut tape = Tape64::new();
        let a = const_t(&mut tape, &[5], &[0.1, -0.7, 1.3, 0.0, 2.2]);
        let b_data: Vec<f64> = [0.1, -0.7, 1.3, 0.0, 2.2].iter().map(|x| 2.0 * x + 3.0).collect();
        let b = const_t(&mut tape, &[5], &b_data);
        let (rho, _) = pearson(&mut tape, a, b, None).unwrap();
        assert!((tape.value(rho).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn affine_invariance_of_magnitude() {
        let mut tape = Tape64::new();
        let xa = [0.4, -0.9, 1.7, 0.2, -1.1, 0.8];
        let xb = [1.0, 0.3, -0.5, 2.1, 0.7, -0.2];
        let a = const_t(&mut tape, &[6], &xa);
        let b = const_t(&mut tape, &[6], &xb);
        let (rho0, _) = pearson(&mut tape, a, b, None).unwrap();
        let base = tape.value(rho0).item().abs();
        for (scale, shift) in [(2.5, -1.0), (0.3, 7.0), (11.0, 0.0)] {
            let ta: Vec<f64> = xa.iter().map(|x| scale * x + shift).collect();
            let a2 = const_t(&mut tape, &[6], &ta);
            let (rho, _) = pearson(&mut tape, a2, b, None).unwrap();
            assert!(
                (tape.value(rho).item().abs() - base).abs() < 1e-10,
                "scale {} shift {}",
                scale,
                shift
            );
        }
    }

    #[test]
    fn hand_built_zero_correlation_fixture() {
        let mut tape = Tape64::new();
        let a = const_t(&mut tape, &[4], &[1.0, -1.0, 1.0, -1.0]);
        let b = const_t(&mut tape, &[4], &[1.0, 1.0, -1.0, -1.0]);
        let (term, degenerate) = disentangle_term(&mut tape, a, b, None, 0.0).unwrap();
        assert!(!degenerate);
        assert_eq!(tape.value(term).item(), 0.0);
    }

    #[test]
    fn zero_variance_is_pinned_not_nan() {
        let mut tape = Tape64::new();
        let a = const_t(&mut tape, &[4], &[2.0, 2.0, 2.0, 2.0]);
        let b = const_t(&mut tape, &[4], &[1.0, 0.0, -1.0, 0.5]);
        let (rho, degenerate) = pearson(&mut tape, a, b, None).unwrap();
        assert!(degenerate);
        assert_eq!(tape.value(rho).item(), 0.0);
    }

    #[test]
    fn mask_restricts_the_sample_set() {
        let mut tape = Tape64::new();
        // Unmasked entries are perfectly correlated; the masked ones would
        // destroy the correlation if counted.
        let a = const_t(&mut tape, &[2, 3], &[1.0, 2.0, 3.0, 99.0, 0.0, 0.0]);
        let b = const_t(&mut tape, &[2, 3], &[2.0, 4.0, 6.0, -5.0, 0.0, 0.0]);
        let mask = [true, true, true, true, false, false];
        let bad = pearson(&mut tape, a, b, Some(&mask)).unwrap();
        assert!(tape.value(bad.0).item() < 0.999);
        let mask2 = [true, true, true, false, false, false];
        let (rho, _) = pearson(&mut tape, a, b, Some(&mask2)).unwrap();
        assert!((tape.value(rho).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn batch_loss_averages_per_video_terms() {
        let mut tape = Tape64::new();
        let x = const_t(&mut tape, &[4], &[0.3, -1.2, 2.0, 0.5]);
        let a = const_t(&mut tape, &[4], &[1.0, -1.0, 1.0, -1.0]);
        let b = const_t(&mut tape, &[4], &[1.0, 1.0, -1.0, -1.0]);
        let (loss, degenerates) =
            disentangle_loss(&mut tape, &[(x, x), (a, b)], &[None, None], 0.1).unwrap();
        assert_eq!(degenerates, 0);
        // (0.9 + 0.0) / 2
        assert!((tape.value(loss).item() - 0.45).abs() < 1e-12);
    }

    fn zero_nets(tape: &mut Tape64, d: usize, h: usize) -> FusionNets {
        FusionNets {
            net1_w1: tape.constant(Tensor64::zeros(&[d, h])).unwrap(),
            net1_b1: tape.constant(Tensor64::zeros(&[h])).unwrap(),
            net1_w2: tape.constant(Tensor64::zeros(&[h, d])).unwrap(),
            net1_b2: tape.constant(Tensor64::zeros(&[d])).unwrap(),
            net2_w1: tape.constant(Tensor64::zeros(&[2 * d, h])).unwrap(),
            net2_b1: tape.constant(Tensor64::zeros(&[h])).unwrap(),
            net2_w2: tape.constant(Tensor64::zeros(&[h, 1])).unwrap(),
            net2_b2: tape.constant(Tensor64::zeros(&[1])).unwrap(),
        }
    }

    #[test]
    fn equal_branches_reconstruct_exactly_at_identity_init() {
        let mut tape = Tape64::new();
        let x = const_t(&mut tape, &[1, 2, 2], &[0.7, -0.3, 1.5, 0.9]);
        let nets = zero_nets(&mut tape, 2, 3);
        let (f_r, delta) = reconstruct(&mut tape, x, x, &[true, true], &nets).unwrap();
        assert_eq!(tape.value(f_r).data(), tape.value(x).data());
        assert_eq!(tape.value(delta).data(), &[0.5, 0.5]);
    }

    #[test]
    fn zero_fusion_head_gives_half_delta() {
        let mut tape = Tape64::new();
        let a = const_t(&mut tape, &[1, 2, 2], &[1.0, 1.0, 0.0, 2.0]);
        let b = const_t(&mut tape, &[1, 2, 2], &[3.0, -1.0, 4.0, 0.0]);
        let nets = zero_nets(&mut tape, 2, 3);
        let (f_r, delta) = reconstruct(&mut tape, a, b, &[true, true], &nets).unwrap();
        assert_eq!(tape.value(delta).data(), &[0.5, 0.5]);
        // Identity-init net1: F_r = (a + b) / 2.
        assert_eq!(tape.value(f_r).data(), &[2.0, 0.0, 2.0, 1.0]);
    }

    #[test]
    fn hand_computed_fusion_fixture() {
        let mut tape = Tape64::new();
        let a = const_t(&mut tape, &[1, 1, 2], &[1.0, 2.0]);
        let b = const_t(&mut tape, &[1, 1, 2], &[3.0, 0.0]);
        let mut nets = zero_nets(&mut tape, 2, 2);
        // net2: first linear sums all four inputs into both hidden units
        // (relu passes positives), second sums the hidden pair.
        nets.net2_w1 = const_t(&mut tape, &[4, 2], &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        nets.net2_w2 = const_t(&mut tape, &[2, 1], &[0.5, 0.5]);
        // net1 residual: adds [sum of coords, 0] scaled by 0.1.
        nets.net1_w1 = const_t(&mut tape, &[2, 2], &[1.0, 0.0, 1.0, 0.0]);
        nets.net1_w2 = const_t(&mut tape, &[2, 2], &[0.1, 0.0, 0.0, 0.0]);
        let (f_r, delta) = reconstruct(&mut tape, a, b, &[true], &nets).unwrap();
        // concat = [1,2,3,0]; hidden = [6,6]; logit = 6; delta = sigmoid(6).
        let dl = 1.0 / (1.0 + (-6.0f64).exp());
        assert!((tape.value(delta).data()[0] - dl).abs() < 1e-12);
        // mix = dl*[1,2] + (1-dl)*[3,0] = [3-2dl, 2dl]
        let mix = [3.0 - 2.0 * dl, 2.0 * dl];
        // net1 residual adds 0.1*(mix0+mix1) to coord 0: mix0+mix1 = 3.
        let want = [mix[0] + 0.1 * 3.0, mix[1]];
        let got = tape.value(f_r).data();
        assert!((got[0] - want[0]).abs() < 1e-12);
        assert!((got[1] - want[1]).abs() < 1e-12);
    }

    #[test]
    fn reconstruct_zeroes_masked_positions() {
        let mut tape = Tape64::new();
        let a = const_t(&mut tape, &[1, 2, 2], &[1.0, 1.0, 0.0, 0.0]);
        let b = const_t(&mut tape, &[1, 2, 2], &[3.0, -1.0, 0.0, 0.0]);
        let mut nets = zero_nets(&mut tape, 2, 2);
        nets.net1_b2 = const_t(&mut tape, &[2], &[0.9, 0.9]);
        let (f_r, _) = reconstruct(&mut tape, a, b, &[true, false], &nets).unwrap();
        let v = tape.value(f_r).data();
        assert_eq!(&v[2..4], &[0.0, 0.0]);
    }

    #[test]
    fn perfect_reconstruction_costs_nothing() {
        let mut tape = Tape64::new();
        let x = const_t(&mut tape, &[1, 2, 2], &[0.4, -0.2, 1.1, 0.6]);
        let term = reconstruction_term(&mut tape, x, x, &[true, true], 0.01).unwrap();
        assert_eq!(tape.value(term).item(), 0.0);
    }

    #[test]
    fn boundary_mse_is_free_and_excess_is_charged() {
        let mut tape = Tape64::new();
        let zero = const_t(&mut tape, &[1, 1, 4], &[0.0; 4]);
        // MSE exactly m2 = 0.25 -> relu(0) = 0.
        let half = const_t(&mut tape, &[1, 1, 4], &[0.5, 0.5, -0.5, -0.5]);
        let at = reconstruction_term(&mut tape, zero, half, &[true], 0.25).unwrap();
        assert_eq!(tape.value(at).item(), 0.0);
        // Unit gap with m2 = 0.25 -> 0.75.
        let ones = const_t(&mut tape, &[1, 1, 4], &[1.0; 4]);
        let over = reconstruction_term(&mut tape, ones, zero, &[true], 0.25).unwrap();
        assert!((tape.value(over).item() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn masked_entries_do_not_enter_the_mse() {
        let mut tape = Tape64::new();
        let a = const_t(&mut tape, &[1, 2, 2], &[1.0, 1.0, 50.0, 50.0]);
        let b = const_t(&mut tape, &[1, 2, 2], &[1.0, 1.0, 0.0, 0.0]);
        let term = reconstruction_term(&mut tape, a, b, &[true, false], 0.0).unwrap();
        assert_eq!(tape.value(term).item(), 0.0);
    }

    #[test]
    fn combination_identity() {
        let mut tape = Tape64::new();
        let c = |tape: &mut Tape64| tape.scalar_const(0.1).unwrap();
        let (u, s, t, d, r) =
            (c(&mut tape), c(&mut tape), c(&mut tape), c(&mut tape), c(&mut tape));
        let w = LossWeights { lambda1: 1.0, lambda2: 1.0, lambda3: 1.0, lambda4: 1.0, m1: 0.1, m2: 0.01 };
        let total = combine(&mut tape, u, s, t, d, r, &w).unwrap();
        assert!((tape.value(total).item() - 0.5).abs() < 1e-15);
        let w2 = LossWeights { lambda4: 0.0, ..w };
        let total2 = combine(&mut tape, u, s, t, d, r, &w2).unwrap();
        assert!((tape.value(total2).item() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn zero_logits_pay_ln_two_per_head() {
        let mut tape = Tape64::new();
        let logits = const_t(&mut tape, &[4], &[0.0; 4]);
        let dis = tape.scalar_const(0.0).unwrap();
        let rec = tape.scalar_const(0.0).unwrap();
        let w = LossWeights::default();
        let br = total_loss(
            &mut tape,
            logits,
            &[1, 0, 0, 0],
            logits,
            &[0, 1, 1, 0],
            logits,
            &[1, 1, 0, 0],
            dis,
            rec,
            &w,
        )
        .unwrap();
        let ln2 = std::f64::consts::LN_2;
        for head in [br.bce_u, br.bce_s, br.bce_t] {
            assert!((tape.value(head).item() - ln2).abs() < 1e-12);
        }
        assert!((tape.value(br.total).item() - 3.0 * ln2).abs() < 1e-12);
    }

    #[test]
    fn non_binary_targets_are_rejected() {
        let mut tape = Tape64::new();
        let logits = const_t(&mut tape, &[2], &[0.0, 0.0]);
        assert!(bce_head(&mut tape, logits, &[1, 2]).is_err());
    }

    #[test]
    fn clamped_terms_send_no_gradient() {
        // m1 above any possible |rho| clamps the term to zero; parameters
        // feeding it must receive exactly zero gradient from that path.
        let mut store = ParamStore64::new();
        let p = store
            .add("x", Tensor64::from_f64(&[4], &[0.3, -0.2, 0.9, 0.1]).unwrap(), true)
            .unwrap();
        let mut tape = Tape64::new();
        let binds = store.bind(&mut tape).unwrap();
        let x = binds.id(p);
        let other = const_t(&mut tape, &[4], &[1.0, 0.4, -0.6, 0.2]);
        let (term, _) = disentangle_term(&mut tape, x, other, None, 1.5).unwrap();
        assert_eq!(tape.value(term).item(), 0.0);
        let grads = tape.backward(term).unwrap();
        let g = grads.get(x).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn objective_gradients_match_finite_differences() {
        let (d, h) = (2usize, 2usize);
        let mut store = ParamStore64::new();
        let mk = |shape: &[usize], seed: usize| {
            let n: usize = shape.iter().product();
            let vals: Vec<f64> =
                (0..n).map(|i| (((i * 23 + seed * 7) % 11) as f64 - 5.0) * 0.13).collect();
            Tensor64::from_f64(shape, &vals).unwrap()
        };
        let names: Vec<(&str, Vec<usize>)> = vec![
            ("n1w1", vec![d, h]),
            ("n1b1", vec![h]),
            ("n1w2", vec![h, d]),
            ("n1b2", vec![d]),
            ("n2w1", vec![2 * d, h]),
            ("n2b1", vec![h]),
            ("n2w2", vec![h, 1]),
            ("n2b2", vec![1]),
            ("fu", vec![2, 2, d]),
            ("fs", vec![2, 2, d]),
            ("head", vec![d, 3]),
        ];
        let mut ids = std::collections::BTreeMap::new();
        for (i, (name, shape)) in names.iter().enumerate() {
            ids.insert(*name, store.add(name, mk(shape, i + 1), true).unwrap());
        }
        let mask = [true, true, true, false];
        let report = grad_check(&mut store, 1e-5, 1e-5, |tape, b| {
            let g = |n: &str| b.id(ids[n]);
            let nets = FusionNets {
                net1_w1: g("n1w1"),
                net1_b1: g("n1b1"),
                net1_w2: g("n1w2"),
                net1_b2: g("n1b2"),
                net2_w1: g("n2w1"),
                net2_b1: g("n2b1"),
                net2_w2: g("n2w2"),
                net2_b2: g("n2b2"),
            };
            let (f_u, f_s) = (g("fu"), g("fs"));
            let (f_r, _) = reconstruct(tape, f_u, f_s, &mask, &nets)?;
            let f_o = tape.constant(
                Tensor64::from_f64(&[2, 2, d], &[0.5, -0.1, 0.8, 0.2, 1.0, -0.4, 0.0, 0.0])
                    .unwrap(),
            )?;
            let elem = expand_mask(&mask, d);
            let (dis, _) =
                disentangle_loss(tape, &[(f_u, f_s)], &[Some(elem.as_slice())], 0.0)?;
            let rec = reconstruction_term(tape, f_o, f_r, &mask, 0.0)?;
            // A small logit head keeps the classification path in the check.
            let flat = tape.reshape(f_u, &[4, d])?;
            let pooled = tape.sum_axes(flat, &[0])?;
            let logits = tape.matmul(pooled, g("head"))?;
            let logits = tape.reshape(logits, &[3])?;
            let br = total_loss(
                tape,
                logits,
                &[1, 0, 0],
                logits,
                &[0, 1, 0],
                logits,
                &[1, 1, 0],
                dis,
                rec,
                &LossWeights { m1: 0.0, m2: 0.0, ..LossWeights::default() },
            )?;
            Ok(br.total)
        })
        .unwrap();
        assert!(report.pass, "{}", report);
    }
}
