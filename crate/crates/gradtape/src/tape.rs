//! The Wengert tape: records every operation of a forward pass, then replays
//! them in reverse to accumulate gradients.
//!
//! Conventions:
//! - every op validates shapes up front and returns `TapeError` on misuse;
//! - every op checks its output for non-finite values and fails fast with the
//!   offending op's name;
//! - reductions and matrix products iterate row-major, so results are
//!   bit-stable across runs.

use crate::scalar::{fl, Real};
use crate::tensor::{strides_of, Tensor};
use thiserror::Error;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(pub(crate) usize);

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TapeError {
    TapeError::Invalid { op, msg: msg.into() }
}

enum Op<F> {
    Leaf,
    Matmul { a: ValueId, b: ValueId },
    BatchMatmul { a: ValueId, b: ValueId },
    Add { a: ValueId, b: ValueId },
    Sub { a: ValueId, b: ValueId },
    Mul { a: ValueId, b: ValueId },
    Div { a: ValueId, b: ValueId },
    Scale { a: ValueId, c: F },
    AddConst { a: ValueId },
    Relu { a: ValueId },
    Sigmoid { a: ValueId },
    Sqrt { a: ValueId },
    Abs { a: ValueId },
    Softmax { a: ValueId },
    MaskedSoftmax { a: ValueId },
    Concat { parts: Vec<ValueId>, axis: usize },
    Gather { a: ValueId, axis: usize, indices: Vec<usize> },
    ScatterAdd { a: ValueId, axis: usize, indices: Vec<usize> },
    Reshape { a: ValueId },
    Broadcast { a: ValueId },
    Permute { a: ValueId, perm: Vec<usize> },
    SumAxes { a: ValueId },
    Embed { table: ValueId, ids: Vec<usize> },
    BceWithLogits { logits: ValueId, targets: Tensor<F> },
}

struct Node<F> {
    value: Tensor<F>,
    requires_grad: bool,
    op: Op<F>,
}

/// Gradients produced by [`Tape::backward`]. Only leaf values retain their
/// gradients; intermediates are freed as the reverse sweep passes them.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, id: ValueId) -> Option<&Tensor<F>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The forward value recorded for `id`.
    pub fn value(&self, id: ValueId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<F>, requires_grad: bool, op: Op<F>) -> Result<ValueId, TapeError> {
        if !value.all_finite() {
            return Err(TapeError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, requires_grad, op });
        Ok(ValueId(self.nodes.len() - 1))
    }

    fn needs(&self, ids: &[ValueId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ── leaves ──────────────────────────────────────────────────────────

    /// Record an input value. `requires_grad` marks it for the backward pass.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Result<ValueId, TapeError> {
        self.push("leaf", value, requires_grad, Op::Leaf)
    }

    /// Record a constant: never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Result<ValueId, TapeError> {
        self.leaf(value, false)
    }

    pub fn scalar_const(&mut self, value: F) -> Result<ValueId, TapeError> {
        self.constant(Tensor::scalar(value))
    }

    // ── matrix products ─────────────────────────────────────────────────

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TapeError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TapeError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::from_vec(vec![m, n], out).expect("matmul shape");
        let rg = self.needs(&[a, b]);
        self.push("matmul", value, rg, Op::Matmul { a, b })
    }

    /// `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn batch_matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TapeError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TapeError::ShapeMismatch { op: "batch_matmul", lhs: sa, rhs: sb });
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![F::zero(); bsz * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bsz {
            matmul_nn(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::from_vec(vec![bsz, m, n], out).expect("batch_matmul shape");
        let rg = self.needs(&[a, b]);
        self.push("batch_matmul", value, rg, Op::BatchMatmul { a, b })
    }

    // ── elementwise binary ──────────────────────────────────────────────

    fn binary(
        &mut self,
        op_name: &'static str,
        a: ValueId,
        b: ValueId,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<ValueId, TapeError> {
        if self.shape(a) != self.shape(b) {
            return Err(TapeError::ShapeMismatch {
                op: op_name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_vec(self.shape(a).to_vec(), data).expect("binary shape");
        let rg = self.needs(&[a, b]);
        self.push(op_name, value, rg, op)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TapeError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TapeError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TapeError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Elementwise division; a zero divisor surfaces as a non-finite error.
    pub fn div(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TapeError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div { a, b })
    }

    // ── elementwise unary ───────────────────────────────────────────────

    pub fn scale(&mut self, a: ValueId, c: F) -> Result<ValueId, TapeError> {
        let value = self.value(a).map(|x| x * c);
        let rg = self.needs(&[a]);
        self.push("scale", value, rg, Op::Scale { a, c })
    }

    pub fn add_const(&mut self, a: ValueId, c: F) -> Result<ValueId, TapeError> {
        let value = self.value(a).map(|x| x + c);
        let rg = self.needs(&[a]);
        self.push("add_const", value, rg, Op::AddConst { a })
    }

    /// `max(x, 0)`; the derivative at exactly 0 is taken to be 0, so clamped
    /// terms propagate no gradient.
    pub fn relu(&mut self, a: ValueId) -> Result<ValueId, TapeError> {
        let value = self.value(a).map(|x| if x > F::zero() { x } else { F::zero() });
        let rg = self.needs(&[a]);
        self.push("relu", value, rg, Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: ValueId) -> Result<ValueId, TapeError> {
        let value = self.value(a).map(stable_sigmoid);
        let rg = self.needs(&[a]);
        self.push("sigmoid", value, rg, Op::Sigmoid { a })
    }

    pub fn sqrt(&mut self, a: ValueId) -> Result<ValueId, TapeError> {
        let value = self.value(a).map(|x| x.sqrt());
        let rg = self.needs(&[a]);
        self.push("sqrt", value, rg, Op::Sqrt { a })
    }

    pub fn abs(&mut self, a: ValueId) -> Result<ValueId, TapeError> {
        let value = self.value(a).map(|x| x.abs());
        let rg = self.needs(&[a]);
        self.push("abs", value, rg, Op::Abs { a })
    }

    // ── softmax family ──────────────────────────────────────────────────

    /// Softmax over the last axis, with max-subtraction for stability.
    pub fn softmax(&mut self, a: ValueId) -> Result<ValueId, TapeError> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(invalid("softmax", "rank-0 input has no softmax axis"));
        }
        let row = *shape.last().unwrap();
        if row == 0 {
            return Err(invalid("softmax", "last axis has extent 0"));
        }
        let src = self.value(a).data();
        let mut out = vec![F::zero(); src.len()];
        for r in 0..src.len() / row {
            let s = &src[r * row..(r + 1) * row];
            let d = &mut out[r * row..(r + 1) * row];
            softmax_row(s, d);
        }
        let value = Tensor::from_vec(shape, out).expect("softmax shape");
        let rg = self.needs(&[a]);
        self.push("softmax", value, rg, Op::Softmax { a })
    }

    /// Softmax over the last axis restricted to positions where `mask` is
    /// true. Masked positions get weight exactly 0; a fully masked row comes
    /// out all-zero.
    pub fn masked_softmax(&mut self, a: ValueId, mask: &[bool]) -> Result<ValueId, TapeError> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(invalid("masked_softmax", "rank-0 input has no softmax axis"));
        }
        if mask.len() != self.value(a).numel() {
            return Err(invalid(
                "masked_softmax",
                format!("mask length {} != element count {}", mask.len(), self.value(a).numel()),
            ));
        }
        let row = *shape.last().unwrap();
        let src = self.value(a).data();
        let mut out = vec![F::zero(); src.len()];
        for r in 0..src.len() / row.max(1) {
            let s = &src[r * row..(r + 1) * row];
            let m = &mask[r * row..(r + 1) * row];
            let d = &mut out[r * row..(r + 1) * row];
            masked_softmax_row(s, m, d);
        }
        let value = Tensor::from_vec(shape, out).expect("masked_softmax shape");
        let rg = self.needs(&[a]);
        self.push("masked_softmax", value, rg, Op::MaskedSoftmax { a })
    }

    // ── shape manipulation ──────────────────────────────────────────────

    pub fn concat(&mut self, parts: &[ValueId], axis: usize) -> Result<ValueId, TapeError> {
        if parts.is_empty() {
            return Err(invalid("concat", "no inputs"));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(invalid("concat", format!("axis {} out of range for rank {}", axis, first.len())));
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().zip(first.iter()).enumerate().any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(TapeError::ShapeMismatch { op: "concat", lhs: first, rhs: s.to_vec() });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![F::zero(); out_shape.iter().product()];
        let mut offset = 0usize;
        for &p in parts {
            let ax = self.shape(p)[axis];
            let src = self.value(p).data();
            for o in 0..outer {
                let dst_start = (o * axis_total + offset) * inner;
                let src_start = o * ax * inner;
                out[dst_start..dst_start + ax * inner]
                    .copy_from_slice(&src[src_start..src_start + ax * inner]);
            }
            offset += ax;
        }
        let value = Tensor::from_vec(out_shape, out).expect("concat shape");
        let rg = self.needs(parts);
        self.push("concat", value, rg, Op::Concat { parts: parts.to_vec(), axis })
    }

    /// Select slices along `axis` by index; indices may repeat.
    pub fn gather(&mut self, a: ValueId, axis: usize, indices: &[usize]) -> Result<ValueId, TapeError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(invalid("gather", format!("axis {} out of range for rank {}", axis, shape.len())));
        }
        let extent = shape[axis];
        if let Some(&bad) = indices.iter().find(|&&i| i >= extent) {
            return Err(invalid("gather", format!("index {} out of range for axis extent {}", bad, extent)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = indices.len();
        let src = self.value(a).data();
        let mut out = vec![F::zero(); outer * indices.len() * inner];
        for o in 0..outer {
            for (t, &idx) in indices.iter().enumerate() {
                let dst = (o * indices.len() + t) * inner;
                let s = (o * extent + idx) * inner;
                out[dst..dst + inner].copy_from_slice(&src[s..s + inner]);
            }
        }
        let value = Tensor::from_vec(out_shape, out).expect("gather shape");
        let rg = self.needs(&[a]);
        self.push("gather", value, rg, Op::Gather { a, axis, indices: indices.to_vec() })
    }

    /// Scatter-add along `axis`: slice `t` of the input is added into slice
    /// `indices[t]` of an output whose `axis` extent is `extent`.
    pub fn scatter_add(
        &mut self,
        a: ValueId,
        axis: usize,
        indices: &[usize],
        extent: usize,
    ) -> Result<ValueId, TapeError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(invalid("scatter_add", format!("axis {} out of range for rank {}", axis, shape.len())));
        }
        if indices.len() != shape[axis] {
            return Err(invalid(
                "scatter_add",
                format!("{} indices for axis extent {}", indices.len(), shape[axis]),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= extent) {
            return Err(invalid("scatter_add", format!("target index {} out of range {}", bad, extent)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = extent;
        let src = self.value(a).data();
        let mut out = vec![F::zero(); outer * extent * inner];
        for o in 0..outer {
            for (t, &idx) in indices.iter().enumerate() {
                let s = (o * indices.len() + t) * inner;
                let d = (o * extent + idx) * inner;
                for i in 0..inner {
                    out[d + i] = out[d + i] + src[s + i];
                }
            }
        }
        let value = Tensor::from_vec(out_shape, out).expect("scatter_add shape");
        let rg = self.needs(&[a]);
        self.push("scatter_add", value, rg, Op::ScatterAdd { a, axis, indices: indices.to_vec() })
    }

    pub fn reshape(&mut self, a: ValueId, shape: &[usize]) -> Result<ValueId, TapeError> {
        let n: usize = shape.iter().product();
        if n != self.value(a).numel() {
            return Err(TapeError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::from_vec(shape.to_vec(), self.value(a).data().to_vec()).expect("reshape");
        let rg = self.needs(&[a]);
        self.push("reshape", value, rg, Op::Reshape { a })
    }

    /// Broadcast size-1 axes up to `shape`; ranks must match.
    pub fn broadcast(&mut self, a: ValueId, shape: &[usize]) -> Result<ValueId, TapeError> {
        let src_shape = self.shape(a).to_vec();
        if src_shape.len() != shape.len()
            || src_shape.iter().zip(shape.iter()).any(|(&s, &d)| s != d && s != 1)
        {
            return Err(TapeError::ShapeMismatch {
                op: "broadcast",
                lhs: src_shape,
                rhs: shape.to_vec(),
            });
        }
        if src_shape == shape {
            // Degenerate broadcast; keep the node so backward stays uniform.
        }
        let src = self.value(a).data();
        let eff = effective_strides(&src_shape, shape);
        let mut out = vec![F::zero(); shape.iter().product()];
        let mut odo = Odometer::new(shape);
        for slot in out.iter_mut() {
            *slot = src[odo.offset(&eff)];
            odo.step();
        }
        let value = Tensor::from_vec(shape.to_vec(), out).expect("broadcast shape");
        let rg = self.needs(&[a]);
        self.push("broadcast", value, rg, Op::Broadcast { a })
    }

    pub fn permute(&mut self, a: ValueId, perm: &[usize]) -> Result<ValueId, TapeError> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(invalid("permute", format!("{:?} is not a permutation of rank {}", perm, shape.len())));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = strides_of(&shape);
        // Stride of output axis d walks input axis perm[d].
        let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let src = self.value(a).data();
        let mut out = vec![F::zero(); src.len()];
        let mut odo = Odometer::new(&out_shape);
        for slot in out.iter_mut() {
            *slot = src[odo.offset(&eff)];
            odo.step();
        }
        let value = Tensor::from_vec(out_shape, out).expect("permute shape");
        let rg = self.needs(&[a]);
        self.push("permute", value, rg, Op::Permute { a, perm: perm.to_vec() })
    }

    /// Sum over `axes`, keeping them as size-1 dims.
    pub fn sum_axes(&mut self, a: ValueId, axes: &[usize]) -> Result<ValueId, TapeError> {
        let shape = self.shape(a).to_vec();
        if axes.is_empty() {
            return Err(invalid("sum_axes", "no axes given"));
        }
        let mut dedup = axes.to_vec();
        dedup.sort_unstable();
        dedup.dedup();
        if dedup.len() != axes.len() || dedup.iter().any(|&ax| ax >= shape.len()) {
            return Err(invalid("sum_axes", format!("axes {:?} invalid for rank {}", axes, shape.len())));
        }
        let mut out_shape = shape.clone();
        for &ax in &dedup {
            out_shape[ax] = 1;
        }
        let eff = effective_strides(&out_shape, &shape);
        let src = self.value(a).data();
        let mut out = vec![F::zero(); out_shape.iter().product()];
        let mut odo = Odometer::new(&shape);
        for &v in src {
            let o = odo.offset(&eff);
            out[o] = out[o] + v;
            odo.step();
        }
        let value = Tensor::from_vec(out_shape, out).expect("sum_axes shape");
        let rg = self.needs(&[a]);
        self.push("sum_axes", value, rg, Op::SumAxes { a })
    }

    /// Sum of all elements as a rank-0 scalar.
    pub fn sum_all(&mut self, a: ValueId) -> Result<ValueId, TapeError> {
        let total: F = self.value(a).data().iter().copied().sum();
        let rg = self.needs(&[a]);
        // Recorded as a sum over all axes of a flat view.
        let n = self.value(a).numel();
        let flat = self.reshape(a, &[n])?;
        let summed = {
            let value = Tensor::scalar(total);
            self.push("sum_all", value, rg, Op::SumAxes { a: flat })?
        };
        Ok(summed)
    }

    pub fn mean_all(&mut self, a: ValueId) -> Result<ValueId, TapeError> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(invalid("mean_all", "empty tensor"));
        }
        let s = self.sum_all(a)?;
        self.scale(s, fl::<F>(1.0 / n as f64))
    }

    /// Look up rows of a `[V, D]` table: output row `t` is `table[ids[t]]`.
    pub fn embed(&mut self, table: ValueId, ids: &[usize]) -> Result<ValueId, TapeError> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(invalid("embed", format!("table must be rank 2, got {:?}", shape)));
        }
        let (v, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(invalid("embed", format!("id {} out of vocabulary {}", bad, v)));
        }
        let src = self.value(table).data();
        let mut out = vec![F::zero(); ids.len() * d];
        for (t, &id) in ids.iter().enumerate() {
            out[t * d..(t + 1) * d].copy_from_slice(&src[id * d..(id + 1) * d]);
        }
        let value = Tensor::from_vec(vec![ids.len(), d], out).expect("embed shape");
        let rg = self.needs(&[table]);
        self.push("embed", value, rg, Op::Embed { table, ids: ids.to_vec() })
    }

    /// Numerically stable elementwise binary cross-entropy on logits:
    /// `max(z,0) - z*y + ln(1 + exp(-|z|))`. Targets are constants and must
    /// lie in [0, 1].
    pub fn bce_with_logits(&mut self, logits: ValueId, targets: &Tensor<F>) -> Result<ValueId, TapeError> {
        if self.shape(logits) != targets.shape() {
            return Err(TapeError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: self.shape(logits).to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        if targets.data().iter().any(|&y| y < F::zero() || y > F::one()) {
            return Err(invalid("bce_with_logits", "targets must lie in [0, 1]"));
        }
        let data = self
            .value(logits)
            .data()
            .iter()
            .zip(targets.data().iter())
            .map(|(&z, &y)| {
                let pos = if z > F::zero() { z } else { F::zero() };
                pos - z * y + (-z.abs()).exp().ln_1p()
            })
            .collect();
        let value = Tensor::from_vec(self.shape(logits).to_vec(), data).expect("bce shape");
        let rg = self.needs(&[logits]);
        self.push("bce_with_logits", value, rg, Op::BceWithLogits { logits, targets: targets.clone() })
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns per-leaf gradients; leaves
    /// created with `requires_grad = false` get none.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients<F>, TapeError> {
        if self.value(loss).numel() != 1 {
            return Err(invalid(
                "backward",
                format!("loss must be a single element, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), F::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !g.all_finite() {
                return Err(TapeError::NonFinite { op: "backward" });
            }
            self.backprop_node(i, &g, &mut grads)?;
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<(), TapeError> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![F::zero(); m * k];
                    matmul_nt(g.data(), self.value(*b).data(), &mut da, m, n, k);
                    self.acc(grads, *a, Tensor::from_vec(sa.to_vec(), da).unwrap());
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![F::zero(); k * n];
                    matmul_tn(self.value(*a).data(), g.data(), &mut db, m, k, n);
                    self.acc(grads, *b, Tensor::from_vec(sb.to_vec(), db).unwrap());
                }
            }
            Op::BatchMatmul { a, b } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![F::zero(); bsz * m * k];
                    for t in 0..bsz {
                        matmul_nt(
                            &g.data()[t * m * n..(t + 1) * m * n],
                            &self.value(*b).data()[t * k * n..(t + 1) * k * n],
                            &mut da[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.acc(grads, *a, Tensor::from_vec(sa.clone(), da).unwrap());
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![F::zero(); bsz * k * n];
                    for t in 0..bsz {
                        matmul_tn(
                            &self.value(*a).data()[t * m * k..(t + 1) * m * k],
                            &g.data()[t * m * n..(t + 1) * m * n],
                            &mut db[t * k * n..(t + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    self.acc(grads, *b, Tensor::from_vec(sb, db).unwrap());
                }
            }
            Op::Add { a, b } => {
                self.acc_if(grads, *a, || g.clone());
                self.acc_if(grads, *b, || g.clone());
            }
            Op::Sub { a, b } => {
                self.acc_if(grads, *a, || g.clone());
                self.acc_if(grads, *b, || g.map(|x| -x));
            }
            Op::Mul { a, b } => {
                self.acc_if(grads, *a, || zip_mul(g, self.value(*b)));
                self.acc_if(grads, *b, || zip_mul(g, self.value(*a)));
            }
            Op::Div { a, b } => {
                // out = a / b: da = g / b, db = -g * out / b
                self.acc_if(grads, *a, || zip_with(g, self.value(*b), |gv, bv| gv / bv));
                self.acc_if(grads, *b, || {
                    let mut t = zip_mul(g, out);
                    for (x, &bv) in t.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *x = -*x / bv;
                    }
                    t
                });
            }
            Op::Scale { a, c } => self.acc_if(grads, *a, || g.map(|x| x * *c)),
            Op::AddConst { a } => self.acc_if(grads, *a, || g.clone()),
            Op::Relu { a } => {
                self.acc_if(grads, *a, || {
                    zip_with(g, self.value(*a), |gv, av| if av > F::zero() { gv } else { F::zero() })
                });
            }
            Op::Sigmoid { a } => {
                self.acc_if(grads, *a, || zip_with(g, out, |gv, s| gv * s * (F::one() - s)));
            }
            Op::Sqrt { a } => {
                let half = fl::<F>(0.5);
                self.acc_if(grads, *a, || zip_with(g, out, |gv, s| gv * half / s));
            }
            Op::Abs { a } => {
                self.acc_if(grads, *a, || {
                    zip_with(g, self.value(*a), |gv, av| {
                        if av > F::zero() {
                            gv
                        } else if av < F::zero() {
                            -gv
                        } else {
                            F::zero()
                        }
                    })
                });
            }
            Op::Softmax { a } | Op::MaskedSoftmax { a } => {
                // Same formula covers both: masked entries have y = 0, so they
                // neither receive nor emit gradient.
                self.acc_if(grads, *a, || {
                    let row = *out.shape().last().unwrap();
                    let y = out.data();
                    let gd = g.data();
                    let mut da = vec![F::zero(); y.len()];
                    for r in 0..y.len() / row.max(1) {
                        let ys = &y[r * row..(r + 1) * row];
                        let gs = &gd[r * row..(r + 1) * row];
                        let dot: F = ys.iter().zip(gs.iter()).map(|(&yv, &gv)| yv * gv).sum();
                        for j in 0..row {
                            da[r * row + j] = ys[j] * (gs[j] - dot);
                        }
                    }
                    Tensor::from_vec(out.shape().to_vec(), da).unwrap()
                });
            }
            Op::Concat { parts, axis } => {
                let axis = *axis;
                let out_shape = out.shape();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[axis];
                let mut offset = 0usize;
                for &p in parts {
                    let ax = self.shape(p)[axis];
                    if self.nodes[p.0].requires_grad {
                        let mut dp = vec![F::zero(); outer * ax * inner];
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * ax * inner;
                            dp[dst..dst + ax * inner].copy_from_slice(&g.data()[src..src + ax * inner]);
                        }
                        let mut shape = out_shape.to_vec();
                        shape[axis] = ax;
                        self.acc(grads, p, Tensor::from_vec(shape, dp).unwrap());
                    }
                    offset += ax;
                }
            }
            Op::Gather { a, axis, indices } => {
                self.acc_if(grads, *a, || {
                    let src_shape = self.shape(*a);
                    let outer: usize = src_shape[..*axis].iter().product();
                    let inner: usize = src_shape[*axis + 1..].iter().product();
                    let extent = src_shape[*axis];
                    let mut da = vec![F::zero(); self.value(*a).numel()];
                    for o in 0..outer {
                        for (t, &idx) in indices.iter().enumerate() {
                            let s = (o * indices.len() + t) * inner;
                            let d = (o * extent + idx) * inner;
                            for k in 0..inner {
                                da[d + k] = da[d + k] + g.data()[s + k];
                            }
                        }
                    }
                    Tensor::from_vec(src_shape.to_vec(), da).unwrap()
                });
            }
            Op::ScatterAdd { a, axis, indices } => {
                self.acc_if(grads, *a, || {
                    let src_shape = self.shape(*a);
                    let outer: usize = src_shape[..*axis].iter().product();
                    let inner: usize = src_shape[*axis + 1..].iter().product();
                    let extent = out.shape()[*axis];
                    let mut da = vec![F::zero(); self.value(*a).numel()];
                    for o in 0..outer {
                        for (t, &idx) in indices.iter().enumerate() {
                            let d = (o * indices.len() + t) * inner;
                            let s = (o * extent + idx) * inner;
                            da[d..d + inner].copy_from_slice(&g.data()[s..s + inner]);
                        }
                    }
                    Tensor::from_vec(src_shape.to_vec(), da).unwrap()
                });
            }
            Op::Reshape { a } => {
                self.acc_if(grads, *a, || {
                    Tensor::from_vec(self.shape(*a).to_vec(), g.data().to_vec()).unwrap()
                });
            }
            Op::Broadcast { a } => {
                self.acc_if(grads, *a, || {
                    let src_shape = self.shape(*a);
                    let eff = effective_strides(src_shape, out.shape());
                    let mut da = vec![F::zero(); self.value(*a).numel()];
                    let mut odo = Odometer::new(out.shape());
                    for &gv in g.data() {
                        let o = odo.offset(&eff);
                        da[o] = da[o] + gv;
                        odo.step();
                    }
                    Tensor::from_vec(src_shape.to_vec(), da).unwrap()
                });
            }
            Op::Permute { a, perm } => {
                self.acc_if(grads, *a, || {
                    // Walk the output in order, adding into permuted input slots.
                    let src_shape = self.shape(*a);
                    let in_strides = strides_of(src_shape);
                    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                    let mut da = vec![F::zero(); self.value(*a).numel()];
                    let mut odo = Odometer::new(out.shape());
                    for &gv in g.data() {
                        da[odo.offset(&eff)] = gv;
                        odo.step();
                    }
                    Tensor::from_vec(src_shape.to_vec(), da).unwrap()
                });
            }
            Op::SumAxes { a, .. } => {
                self.acc_if(grads, *a, || {
                    let src_shape = self.shape(*a);
                    let eff = effective_strides(out.shape(), src_shape);
                    let mut da = vec![F::zero(); self.value(*a).numel()];
                    let mut odo = Odometer::new(src_shape);
                    for slot in da.iter_mut() {
                        *slot = g.data()[odo.offset(&eff)];
                        odo.step();
                    }
                    Tensor::from_vec(src_shape.to_vec(), da).unwrap()
                });
            }
            Op::Embed { table, ids } => {
                self.acc_if(grads, *table, || {
                    let shape = self.shape(*table);
                    let d = shape[1];
                    let mut dt = vec![F::zero(); self.value(*table).numel()];
                    for (t, &id) in ids.iter().enumerate() {
                        for k in 0..d {
                            dt[id * d + k] = dt[id * d + k] + g.data()[t * d + k];
                        }
                    }
                    Tensor::from_vec(shape.to_vec(), dt).unwrap()
                });
            }
            Op::BceWithLogits { logits, targets } => {
                self.acc_if(grads, *logits, || {
                    let z = self.value(*logits).data();
                    let mut dz = vec![F::zero(); z.len()];
                    for ((slot, &zv), (&yv, &gv)) in
                        dz.iter_mut().zip(z).zip(targets.data().iter().zip(g.data()))
                    {
                        *slot = gv * (stable_sigmoid(zv) - yv);
                    }
                    Tensor::from_vec(out.shape().to_vec(), dz).unwrap()
                });
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor<F>>], id: ValueId, t: Tensor<F>) {
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    fn acc_if(&self, grads: &mut [Option<Tensor<F>>], id: ValueId, f: impl FnOnce() -> Tensor<F>) {
        if self.nodes[id.0].requires_grad {
            let t = f();
            self.acc(grads, id, t);
        }
    }
}

// ── kernels ─────────────────────────────────────────────────────────────

/// C[m,n] += A[m,k] * B[k,n]
fn matmul_nn<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + aip * brow[j];
            }
        }
    }
}

/// C[m,n] += A[m,k] * B^T where B is [n,k]
fn matmul_nt<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for p in 0..k {
                acc = acc + arow[p] * brow[p];
            }
            c[i * n + j] = c[i * n + j] + acc;
        }
    }
}

/// C[k,n] += A^T * B where A is [m,k], B is [m,n]
fn matmul_tn<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = arow[p];
            if aip == F::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + aip * brow[j];
            }
        }
    }
}

fn softmax_row<F: Real>(src: &[F], dst: &mut [F]) {
    let mut max = src[0];
    for &v in &src[1..] {
        if v > max {
            max = v;
        }
    }
    let mut sum = F::zero();
    for (d, &s) in dst.iter_mut().zip(src) {
        let e = (s - max).exp();
        *d = e;
        sum = sum + e;
    }
    for d in dst.iter_mut() {
        *d = *d / sum;
    }
}

fn masked_softmax_row<F: Real>(src: &[F], mask: &[bool], dst: &mut [F]) {
    let mut max: Option<F> = None;
    for (&s, &m) in src.iter().zip(mask) {
        if m && max.map_or(true, |mx| s > mx) {
            max = Some(s);
        }
    }
    let Some(max) = max else {
        for d in dst.iter_mut() {
            *d = F::zero();
        }
        return;
    };
    let mut sum = F::zero();
    for ((d, &s), &m) in dst.iter_mut().zip(src).zip(mask) {
        if m {
            let e = (s - max).exp();
            *d = e;
            sum = sum + e;
        } else {
            *d = F::zero();
        }
    }
    for d in dst.iter_mut() {
        *d = *d / sum;
    }
}

fn stable_sigmoid<F: Real>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

fn zip_with<F: Real>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let data = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape().to_vec(), data).unwrap()
}

fn zip_mul<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    zip_with(a, b, |x, y| x * y)
}

/// Strides for reading a possibly smaller tensor (`src_shape`, with size-1
/// axes standing in for broadcast) while walking `dst_shape` element by
/// element: broadcast axes get stride 0.
fn effective_strides(src_shape: &[usize], dst_shape: &[usize]) -> Vec<usize> {
    let src_strides = strides_of(src_shape);
    src_shape
        .iter()
        .zip(dst_shape)
        .zip(src_strides)
        .map(|((&s, &d), st)| if s == d { st } else { debug_assert_eq!(s, 1); 0 })
        .collect()
}

/// Row-major coordinate counter with an offset accumulator.
struct Odometer {
    shape: Vec<usize>,
    coord: Vec<usize>,
}

impl Odometer {
    fn new(shape: &[usize]) -> Self {
        Odometer { shape: shape.to_vec(), coord: vec![0; shape.len()] }
    }

    fn offset(&self, strides: &[usize]) -> usize {
        self.coord.iter().zip(strides).map(|(&c, &s)| c * s).sum()
    }

    fn step(&mut self) {
        for d in (0..self.shape.len()).rev() {
            self.coord[d] += 1;
            if self.coord[d] < self.shape[d] {
                return;
            }
            self.coord[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_small() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), true).unwrap();
        let b = tape.leaf(t64(&[2, 2], &[5.0, 6.0, 7.0, 8.0]), true).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn softmax_symmetric_pair_is_half_half() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t64(&[2], &[0.0, 0.0])).unwrap();
        let s = tape.softmax(a).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_known_ratio() {
        // exp(ln 3) : exp(0) = 3 : 1
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t64(&[2], &[3.0f64.ln(), 0.0])).unwrap();
        let s = tape.softmax(a).unwrap();
        let got = tape.value(s).data();
        assert!((got[0] - 0.75).abs() < 1e-15);
        assert!((got[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let a = tape
            .constant(t64(&[3, 4], &[-3.0, 100.0, 0.1, 2.0, 5.0, 5.0, 5.0, 5.0, -1e8, 0.0, 1.0, 2.0]))
            .unwrap();
        let s = tape.softmax(a).unwrap();
        for r in 0..3 {
            let sum: f64 = tape.value(s).data()[r * 4..(r + 1) * 4].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {} sums to {}", r, sum);
        }
    }

    #[test]
    fn masked_softmax_zeroes_masked_and_fully_masked_rows() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let s = tape.masked_softmax(a, &[true, false, true, false, false, false]).unwrap();
        let v = tape.value(s).data();
        assert_eq!(v[1], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
        assert_eq!(&v[3..6], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_forward_and_zero_at_boundary_grad() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t64(&[3], &[-1.0, 0.0, 2.0]), true).unwrap();
        let r = tape.relu(a).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum_all(r).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn bce_at_zero_logit_equal_one_target_is_ln2() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(t64(&[1], &[0.0]), true).unwrap();
        let l = tape.bce_with_logits(z, &t64(&[1], &[1.0])).unwrap();
        assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
        // d/dz = sigmoid(0) - 1 = -0.5
        let s = tape.sum_all(l).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!((grads.get(z).unwrap().data()[0] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn bce_rejects_out_of_range_targets() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(t64(&[1], &[0.0]), true).unwrap();
        assert!(matches!(
            tape.bce_with_logits(z, &t64(&[1], &[1.5])),
            Err(TapeError::Invalid { op: "bce_with_logits", .. })
        ));
    }

    #[test]
    fn division_by_zero_reports_offending_op() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t64(&[1], &[1.0])).unwrap();
        let b = tape.constant(t64(&[1], &[0.0])).unwrap();
        assert!(matches!(tape.div(a, b), Err(TapeError::NonFinite { op: "div" })));
    }

    #[test]
    fn shape_mismatch_reports_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[3, 3])).unwrap();
        match tape.add(a, b) {
            Err(TapeError::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "add");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![3, 3]);
            }
            other => panic!("expected shape mismatch, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t64(&[2], &[1.0, 2.0]), true).unwrap();
        let c = tape.constant(t64(&[2], &[3.0, 4.0])).unwrap();
        let p = tape.mul(a, c).unwrap();
        let s = tape.sum_all(p).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[3.0, 4.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn permute_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let p = tape.permute(a, &[1, 0]).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let back = tape.permute(p, &[1, 0]).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(a).data());
    }

    #[test]
    fn gather_scatter_are_duals() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true).unwrap();
        let gth = tape.gather(a, 0, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(gth).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let sct = tape.scatter_add(gth, 0, &[0, 0, 1], 2).unwrap();
        assert_eq!(tape.value(sct).data(), &[6.0, 8.0, 5.0, 6.0]);
        let s = tape.sum_all(sct).unwrap();
        let grads = tape.backward(s).unwrap();
        // Row 2 was gathered twice.
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn broadcast_and_sum_are_adjoint() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t64(&[1, 3], &[1.0, 2.0, 3.0]), true).unwrap();
        let b = tape.broadcast(a, &[4, 3]).unwrap();
        assert_eq!(tape.value(b).numel(), 12);
        let s = tape.sum_all(b).unwrap();
        assert_eq!(tape.value(s).item(), 24.0);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[4.0, 4.0, 4.0]);
    }

    #[test]
    fn backward_of_sum_equals_sum_of_backwards() {
        // d(l1 + l2)/dx == dl1/dx + dl2/dx on a shared subgraph.
        let build = |which: u8| -> (Tensor<f64>, Tensor<f64>) {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(t64(&[2], &[0.3, -0.7]), true).unwrap();
            let s1 = tape.sigmoid(x).unwrap();
            let l1 = tape.sum_all(s1).unwrap();
            let sq = tape.mul(x, x).unwrap();
            let l2 = tape.sum_all(sq).unwrap();
            let loss = match which {
                0 => l1,
                1 => l2,
                _ => tape.add(l1, l2).unwrap(),
            };
            let grads = tape.backward(loss).unwrap();
            (grads.get(x).unwrap().clone(), tape.value(loss).clone())
        };
        let (g1, _) = build(0);
        let (g2, _) = build(1);
        let (gsum, _) = build(2);
        for i in 0..2 {
            assert!((gsum.data()[i] - g1.data()[i] - g2.data()[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn f32_instantiation_works() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::from_vec(vec![2], vec![1.0f32, 2.0]).unwrap(), true).unwrap();
        let b = tape.mul(a, a).unwrap();
        let s = tape.sum_all(b).unwrap();
        assert_eq!(tape.value(s).item(), 5.0);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[2.0f32, 4.0]);
    }
}
