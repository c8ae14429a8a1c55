//! Central-difference gradient verification.
//!
//! The checker rebuilds the forward pass twice per parameter entry (once at
//! `+eps`, once at `-eps`) and compares the numeric slope against the
//! tape-computed gradient using a symmetric relative error:
//! `|g_a - g_n| / max(1e-8, |g_a| + |g_n|)`.

use crate::params::{Bindings, ParamStore};
use crate::scalar::{fl, Real};
use crate::tape::{Tape, TapeError, ValueId};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("step size {0} outside [1e-7, 1e-3]")]
    BadEps(f64),
    #[error("forward pass failed: {0}")]
    Tape(#[from] TapeError),
    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

/// Verdict for a single parameter tensor.
#[derive(Debug, Clone)]
pub struct GradEntry {
    pub name: String,
    /// Worst relative error across the tensor's entries.
    pub max_rel_err: f64,
    /// Flat index where the worst error occurred.
    pub worst_index: usize,
    /// Analytic and numeric gradients at that index.
    pub analytic: f64,
    pub numeric: f64,
    /// Number of entries checked.
    pub checked: usize,
}

/// Full report, sorted worst-first.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
    pub eps: f64,
    pub tol: f64,
    pub max_rel_err: f64,
    pub pass: bool,
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "gradient check: {} (eps {:.1e}, tol {:.1e}, max rel err {:.3e})",
            if self.pass { "PASS" } else { "FAIL" },
            self.eps,
            self.tol,
            self.max_rel_err
        )?;
        for e in &self.entries {
            writeln!(
                f,
                "  {:<40} max_rel_err {:.3e}  at [{}]  analytic {:+.6e}  numeric {:+.6e}",
                e.name, e.max_rel_err, e.worst_index, e.analytic, e.numeric
            )?;
        }
        Ok(())
    }
}

/// Compare analytic and central-difference gradients for every trainable
/// parameter in `store`. `f` must rebuild the same scalar loss each call; it
/// receives a fresh tape with the (possibly perturbed) parameters bound.
pub fn grad_check<F: Real>(
    store: &mut ParamStore<F>,
    eps: f64,
    tol: f64,
    mut f: impl FnMut(&mut Tape<F>, &Bindings) -> Result<ValueId, TapeError>,
) -> Result<GradReport, GradCheckError> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(GradCheckError::BadEps(eps));
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let bindings = store.bind(&mut tape)?;
    let loss = f(&mut tape, &bindings)?;
    if tape.value(loss).numel() != 1 {
        return Err(GradCheckError::NonScalarLoss(tape.shape(loss).to_vec()));
    }
    let grads = tape.backward(loss)?;
    let trainable: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, p)| (id, p.name.clone(), p.tensor.numel()))
        .collect();
    let analytic: Vec<Vec<f64>> = trainable
        .iter()
        .map(|&(id, _, numel)| {
            grads
                .get(bindings.id(id))
                .map(|t| t.to_f64_vec())
                .unwrap_or_else(|| vec![0.0; numel])
        })
        .collect();
    drop(tape);

    let mut eval_loss = |store: &ParamStore<F>| -> Result<f64, GradCheckError> {
        let mut tape = Tape::new();
        let b = store.bind(&mut tape)?;
        let l = f(&mut tape, &b)?;
        Ok(tape.value(l).item().as_f64())
    };

    let mut entries = Vec::with_capacity(trainable.len());
    for (t_idx, &(id, ref name, numel)) in trainable.iter().enumerate() {
        let mut worst = GradEntry {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: if numel > 0 { analytic[t_idx][0] } else { 0.0 },
            numeric: 0.0,
            checked: numel,
        };
        for j in 0..numel {
            let original = store.get(id).tensor.data()[j];
            let base = original.as_f64();
            store.get_mut(id).tensor.data_mut()[j] = fl(base + eps);
            let plus = eval_loss(store)?;
            store.get_mut(id).tensor.data_mut()[j] = fl(base - eps);
            let minus = eval_loss(store)?;
            store.get_mut(id).tensor.data_mut()[j] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[t_idx][j];
            let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
            if rel >= worst.max_rel_err {
                worst.max_rel_err = rel;
                worst.worst_index = j;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        entries.push(worst);
    }
    entries.sort_by(|a, b| b.max_rel_err.partial_cmp(&a.max_rel_err).unwrap());
    let max_rel_err = entries.first().map(|e| e.max_rel_err).unwrap_or(0.0);
    Ok(GradReport { entries, eps, tol, max_rel_err, pass: max_rel_err <= tol })
}
