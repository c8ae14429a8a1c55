//! Small composed building blocks. These are plain compositions of tape
//! primitives, so they need no backward rules of their own.

use crate::scalar::{fl, Real};
use crate::tape::{Tape, TapeError, ValueId};
use crate::tensor::Tensor;

/// `y = x @ w (+ b)` applied over the last axis; `w` is `[in, out]`,
/// `b` is `[out]`. Leading axes of `x` are preserved.
pub fn linear<F: Real>(
    tape: &mut Tape<F>,
    x: ValueId,
    w: ValueId,
    b: Option<ValueId>,
) -> Result<ValueId, TapeError> {
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(w).to_vec();
    if ws.len() != 2 || xs.last() != Some(&ws[0]) {
        return Err(TapeError::ShapeMismatch { op: "linear", lhs: xs, rhs: ws });
    }
    let (din, dout) = (ws[0], ws[1]);
    let rows = tape.value(x).numel() / din.max(1);
    let flat = tape.reshape(x, &[rows, din])?;
    let mut y = tape.matmul(flat, w)?;
    if let Some(b) = b {
        if tape.shape(b) != [dout] {
            return Err(TapeError::ShapeMismatch {
                op: "linear",
                lhs: tape.shape(b).to_vec(),
                rhs: vec![dout],
            });
        }
        let brow = tape.reshape(b, &[1, dout])?;
        let bb = tape.broadcast(brow, &[rows, dout])?;
        y = tape.add(y, bb)?;
    }
    let mut out_shape = xs;
    *out_shape.last_mut().unwrap() = dout;
    tape.reshape(y, &out_shape)
}

/// Two-layer perceptron with a ReLU in between.
pub fn mlp2<F: Real>(
    tape: &mut Tape<F>,
    x: ValueId,
    w1: ValueId,
    b1: ValueId,
    w2: ValueId,
    b2: ValueId,
) -> Result<ValueId, TapeError> {
    let h = linear(tape, x, w1, Some(b1))?;
    let h = tape.relu(h)?;
    linear(tape, h, w2, Some(b2))
}

/// Projection weights for single-head scaled-dot-product attention.
#[derive(Debug, Clone, Copy)]
pub struct AttnParams {
    pub wq: ValueId,
    pub bq: ValueId,
    pub wk: ValueId,
    pub bk: ValueId,
    pub wv: ValueId,
    pub bv: ValueId,
}

/// The attention aggregation alone: softmax(QK^T / sqrt(D)) V, with invalid
/// key positions masked out of the softmax. `x` is `[B, S, D]`, `valid` has
/// one flag per `(batch, position)`. A single valid position receives weight
/// exactly 1, so the result there is exactly the value projection.
pub fn attention_core<F: Real>(
    tape: &mut Tape<F>,
    x: ValueId,
    valid: &[bool],
    p: &AttnParams,
) -> Result<ValueId, TapeError> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(TapeError::Invalid {
            op: "attention",
            msg: format!("input must be [batch, seq, dim], got {:?}", shape),
        });
    }
    let (b, s, d) = (shape[0], shape[1], shape[2]);
    if valid.len() != b * s {
        return Err(TapeError::Invalid {
            op: "attention",
            msg: format!("validity mask length {} != {}x{}", valid.len(), b, s),
        });
    }
    let q = linear(tape, x, p.wq, Some(p.bq))?;
    let k = linear(tape, x, p.wk, Some(p.bk))?;
    let v = linear(tape, x, p.wv, Some(p.bv))?;
    let kt = tape.permute(k, &[0, 2, 1])?;
    let scores = tape.batch_matmul(q, kt)?;
    let scaled = tape.scale(scores, fl::<F>(1.0 / (d as f64).sqrt()))?;
    // Every query row attends over the same set of valid keys.
    let mut mask = vec![false; b * s * s];
    for bi in 0..b {
        for i in 0..s {
            for j in 0..s {
                mask[(bi * s + i) * s + j] = valid[bi * s + j];
            }
        }
    }
    let attn = tape.masked_softmax(scaled, &mask)?;
    tape.batch_matmul(attn, v)
}

/// Residual self-attention: `x + attention_core(x)`, with invalid positions
/// zeroed in the output.
pub fn self_attention<F: Real>(
    tape: &mut Tape<F>,
    x: ValueId,
    valid: &[bool],
    p: &AttnParams,
) -> Result<ValueId, TapeError> {
    let core = attention_core(tape, x, valid, p)?;
    let res = tape.add(x, core)?;
    let shape = tape.shape(x).to_vec();
    let (b, s, d) = (shape[0], shape[1], shape[2]);
    let m = mask_tensor(tape, valid, &[b, s, 1])?;
    let mb = tape.broadcast(m, &[b, s, d])?;
    tape.mul(res, mb)
}

/// A 0/1 constant tensor built from boolean flags.
pub fn mask_tensor<F: Real>(
    tape: &mut Tape<F>,
    flags: &[bool],
    shape: &[usize],
) -> Result<ValueId, TapeError> {
    let data: Vec<F> = flags.iter().map(|&v| if v { F::one() } else { F::zero() }).collect();
    let t = Tensor::from_vec(shape.to_vec(), data).map_err(|e| TapeError::Invalid {
        op: "mask_tensor",
        msg: e.to_string(),
    })?;
    tape.constant(t)
}

/// Mean squared error between two same-shape values, as a scalar.
pub fn mse<F: Real>(tape: &mut Tape<F>, a: ValueId, b: ValueId) -> Result<ValueId, TapeError> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    tape.mean_all(sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn linear_applies_over_last_axis() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[2, 2, 3], &[1.0; 12]).unwrap()).unwrap();
        let w = tape.constant(Tensor::from_f64(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap()).unwrap();
        let b = tape.constant(Tensor::from_f64(&[2], &[10.0, 20.0]).unwrap()).unwrap();
        let y = linear(&mut tape, x, w, Some(b)).unwrap();
        assert_eq!(tape.shape(y), &[2, 2, 2]);
        assert_eq!(tape.value(y).data()[0], 12.0);
        assert_eq!(tape.value(y).data()[1], 22.0);
    }

    #[test]
    fn single_valid_position_gets_weight_one() {
        // With one element in the sequence, the attention output must equal
        // the value projection exactly.
        let mut tape = Tape::<f64>::new();
        let d = 3;
        let x = tape.constant(Tensor::from_f64(&[1, 1, 3], &[0.5, -1.0, 2.0]).unwrap()).unwrap();
        let eye = Tensor::from_f64(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let zeros = Tensor::zeros(&[3]);
        let wq = tape.constant(eye.clone()).unwrap();
        let wk = tape.constant(eye.clone()).unwrap();
        let wv = tape.constant(eye.map(|v| v * 2.0)).unwrap();
        let bq = tape.constant(zeros.clone()).unwrap();
        let bk = tape.constant(zeros.clone()).unwrap();
        let bv = tape.constant(Tensor::from_f64(&[3], &[1.0, 1.0, 1.0]).unwrap()).unwrap();
        let p = AttnParams { wq, bq, wk, bk, wv, bv };
        let out = attention_core(&mut tape, x, &[true], &p).unwrap();
        // value projection: 2*x + 1
        let expect = [2.0, -1.0, 5.0];
        for i in 0..d {
            assert!((tape.value(out).data()[i] - expect[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn self_attention_zeroes_invalid_positions() {
        let mut tape = Tape::<f64>::new();
        let x = tape
            .constant(Tensor::from_f64(&[1, 2, 2], &[0.5, -1.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let eye = Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let zeros = Tensor::zeros(&[2]);
        let wq = tape.constant(eye.clone()).unwrap();
        let wk = tape.constant(eye.clone()).unwrap();
        let wv = tape.constant(eye).unwrap();
        let bq = tape.constant(zeros.clone()).unwrap();
        let bk = tape.constant(zeros.clone()).unwrap();
        let bv = tape.constant(zeros).unwrap();
        let p = AttnParams { wq, bq, wk, bk, wv, bv };
        let out = self_attention(&mut tape, x, &[true, false], &p).unwrap();
        let v = tape.value(out).data();
        assert_eq!(&v[2..4], &[0.0, 0.0]);
        // Valid position: residual + value of itself (sole valid key) = 2x.
        assert!((v[0] - 1.0).abs() < 1e-15);
        assert!((v[1] + 2.0).abs() < 1e-15);
    }
}
