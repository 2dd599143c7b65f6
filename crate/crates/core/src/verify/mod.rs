//! Gradient verification: finite differences, a stop-gradient reference
//! and a grid of equivalence properties.

pub mod oracle;
pub mod suite;

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{GradStore, ParamId, Tape};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tokentune::{tokentune_loss, Options, TokenPartition};
use crate::transformer::{Target, TokenSequence, TransformerModel};

pub use oracle::{snapshot, stopgrad_loss, stopgrad_reference_backward, Snapshot};
pub use suite::{
    equivalence_suite, grid, value_error, GridPoint, Property, PropertyResult, SuiteOptions, SuiteReport,
    GRAD_TOLERANCE, VALUE_TOLERANCE,
};

/// Floor of the denominator in [`rel_err`].
pub const REL_FLOOR: f64 = 1e-8;

/// `|a - b| / max(|a|, |b|, 1e-8)`
pub fn rel_err(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Largest elementwise [`rel_err`]; shapes must agree.
pub fn max_rel_err(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { op: "max_rel_err", lhs: a.shape(), rhs: b.shape() });
    }
    Ok(a.data().iter().zip(b.data()).map(|(&x, &y)| rel_err(x, y)).fold(0.0, f64::max))
}

/// Largest relative error between two gradient stores; a parameter missing
/// from one side counts as a zero gradient.
pub fn grad_store_rel_err(model: &TransformerModel, a: &GradStore, b: &GradStore) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (id, p) in model.params.iter() {
        let zero = Matrix::zeros(p.value.rows(), p.value.cols(), p.value.dtype());
        let (ga, gb) = (a.get(id).unwrap_or(&zero), b.get(id).unwrap_or(&zero));
        worst = worst.max(max_rel_err(ga, gb)?);
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdOptions {
    pub step: f64,
    /// Parameters with more elements than this are subsampled.
    pub subsample_above: usize,
    pub samples: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self { step: 1e-5, subsample_above: 4096, samples: 256, seed: 0 }
    }
}

impl FdOptions {
    /// Flat coordinates checked for a tensor of `len` elements, sorted.
    pub fn coordinates(&self, len: usize, salt: u64) -> Vec<usize> {
        if len <= self.subsample_above {
            return (0..len).collect();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut c = sample(&mut rng, len, self.samples.min(len)).into_vec();
        c.sort_unstable();
        c
    }
}

/// Central differences of `f` at `theta` along each coordinate in `coords`.
pub fn finite_diff(
    theta: &[f64],
    coords: &[usize],
    step: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut x = theta.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &c in coords {
        if c >= x.len() {
            return Err(Error::OutOfRange { what: "coordinate", index: c, limit: x.len() });
        }
        let orig = x[c];
        let mut at = |offset: f64| -> Result<f64> {
            x[c] = orig + offset;
            let v = f(&x)?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite { op: "finite difference" })
            }
        };
        let (plus, minus) = (at(step)?, at(-step)?);
        x[c] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// Central differences of `loss` with respect to parameter `id` of `model`.
pub fn finite_diff_param(
    model: &TransformerModel,
    id: ParamId,
    coords: &[usize],
    step: f64,
    mut loss: impl FnMut(&TransformerModel) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut work = model.clone();
    let theta = model.params.value(id).data().to_vec();
    finite_diff(&theta, coords, step, |x| {
        let value = &mut work.params.get_mut(id).value;
        value.data_mut().copy_from_slice(x);
        value.round_in_place();
        loss(&work)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "{:<28} {:>6} coords  max_rel_err {:.3e}",
                p.name, p.checked, p.max_rel_err
            )?;
        }
        if let Some(w) = self.worst() {
            writeln!(
                f,
                "worst: {}[{}] analytic {:.9e} numeric {:.9e}",
                w.name, w.worst_coord, w.analytic, w.numeric
            )?;
        }
        write!(
            f,
            "{} (max_rel_err {:.3e}, tolerance {:.1e})",
            if self.pass { "PASS" } else { "FAIL" },
            self.max_rel_err(),
            self.tolerance
        )
    }
}

/// Token-selective gradients of one example.
pub fn tokentune_grads(
    model: &TransformerModel,
    seq: &TokenSequence,
    target: &Target,
    partition: &TokenPartition,
    opts: &Options,
) -> Result<GradStore> {
    let mut tape = Tape::new(model.dtype());
    let b = model.bind(&mut tape);
    let loss = tokentune_loss(&mut tape, model, &b, seq, target, partition, opts)?;
    tape.backward(loss)
}

/// Plain full-backpropagation gradients of one example.
pub fn full_grads(model: &TransformerModel, seq: &TokenSequence, target: &Target) -> Result<GradStore> {
    let mut tape = Tape::new(model.dtype());
    let b = model.bind(&mut tape);
    let loss = model.plain_loss(&mut tape, &b, seq, target)?;
    tape.backward(loss)
}

/// Compares token-selective gradients of every trainable parameter with
/// central differences of the loss whose unselected rows are held at their
/// values for the current parameters.
pub fn gradcheck(
    model: &TransformerModel,
    seq: &TokenSequence,
    target: &Target,
    partition: &TokenPartition,
    opts: &Options,
    fd: &FdOptions,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let grads = tokentune_grads(model, seq, target, partition, opts)?;
    let snap = snapshot(model, seq, target, &partition.selected)?;
    let frozen_loss = |m: &TransformerModel| -> Result<f64> {
        let mut tape = Tape::new(m.dtype());
        tape.with_grad_disabled(|t| {
            let l = stopgrad_loss(t, m, seq, target, &partition.selected, Some(&snap))?;
            Ok(t.value(l).get(0, 0))
        })
    };
    let mut params = Vec::new();
    for (id, p) in model.params.trainable() {
        let coords = fd.coordinates(p.value.len(), id.0 as u64);
        let numeric = finite_diff_param(model, id, &coords, fd.step, frozen_loss)?;
        let zero = Matrix::zeros(p.value.rows(), p.value.cols(), p.value.dtype());
        let analytic = grads.get(id).unwrap_or(&zero);
        let mut check = ParamCheck {
            name: p.name.clone(),
            checked: coords.len(),
            max_rel_err: 0.0,
            worst_coord: coords.first().copied().unwrap_or(0),
            analytic: 0.0,
            numeric: 0.0,
        };
        for (&c, &num) in coords.iter().zip(&numeric) {
            let an = analytic.data()[c];
            let e = rel_err(an, num);
            if e > check.max_rel_err || c == check.worst_coord {
                check.max_rel_err = check.max_rel_err.max(e);
                check.worst_coord = c;
                check.analytic = an;
                check.numeric = num;
            }
        }
        params.push(check);
    }
    let pass = params.iter().all(|p| p.max_rel_err <= tolerance);
    Ok(GradCheckReport { params, tolerance, pass })
}

#[cfg(test)]
mod tests;
