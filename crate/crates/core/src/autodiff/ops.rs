//! Forward and backward rules for the primitive set.
//!
//! Each primitive declares which tensors its backward rule reads, as
//! `(inputs read, outputs read)`. Only those are saved on the tape, and a
//! backward rule receives nothing else: it cannot peek at an input value
//! it did not ask to keep.

use crate::error::{Error, Result};
use crate::matrix::{gemm, Dtype, Matrix};

/// Attention-style mask: `allowed[r * cols + c]` is true when query `r` may look at key `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "mask",
                lhs: (rows, cols),
                rhs: (allowed.len(), 1),
            });
        }
        Ok(Self { rows, cols, allowed })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                allowed.push(f(r, c));
            }
        }
        Self { rows, cols, allowed }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn allowed(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Nonlinearity {
    /// tanh approximation of GELU
    Gelu,
    Tanh,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Nonlinearity {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Nonlinearity::Tanh => x.tanh(),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            Nonlinearity::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

/// A primitive operation together with its attributes.
#[derive(Clone, Debug)]
pub enum Op {
    /// `scale * a * b` or `scale * a * b^T`.
    Matmul { transpose_rhs: bool, scale: f64 },
    /// `a + b` where `b` has the shape of `a` or is a single row.
    AddBroadcast,
    /// Row-wise softmax; masked entries get exactly zero weight.
    RowSoftmax { mask: Option<Mask> },
    Elementwise(Nonlinearity),
    /// Inputs: `x`, scale row, shift row.
    LayerNorm { eps: f64 },
    RowSelect { rows: Vec<usize> },
    ColSlice { start: usize, len: usize },
    ConcatRows,
    ConcatCols,
    MeanRows,
    /// `scale * sum_i -log softmax(logits_i)[targets_i]`, a 1x1 output.
    CrossEntropy { targets: Vec<usize>, scale: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    Matmul,
    AddBroadcast,
    RowSoftmax,
    Elementwise,
    LayerNorm,
    RowSelect,
    ColSlice,
    ConcatRows,
    ConcatCols,
    MeanRows,
    CrossEntropy,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Matmul => "matmul",
            OpKind::AddBroadcast => "add_broadcast",
            OpKind::RowSoftmax => "row_softmax",
            OpKind::Elementwise => "elementwise",
            OpKind::LayerNorm => "layer_norm",
            OpKind::RowSelect => "row_select",
            OpKind::ColSlice => "col_slice",
            OpKind::ConcatRows => "concat_rows",
            OpKind::ConcatCols => "concat_cols",
            OpKind::MeanRows => "mean_rows",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Matmul { .. } => OpKind::Matmul,
            Op::AddBroadcast => OpKind::AddBroadcast,
            Op::RowSoftmax { .. } => OpKind::RowSoftmax,
            Op::Elementwise(_) => OpKind::Elementwise,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::RowSelect { .. } => OpKind::RowSelect,
            Op::ColSlice { .. } => OpKind::ColSlice,
            Op::ConcatRows => OpKind::ConcatRows,
            Op::ConcatCols => OpKind::ConcatCols,
            Op::MeanRows => OpKind::MeanRows,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }

    /// Drops forward-only attributes once the node is recorded.
    pub(crate) fn strip_forward_only(&mut self) {
        if let Op::RowSoftmax { mask } = self {
            *mask = None;
        }
    }
}

/// What a backward rule needs kept alive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum SaveSpec {
    Input { role: &'static str, index: usize },
    Output { role: &'static str },
    Internal { role: &'static str },
}

/// Cache policy per primitive, given which inputs need a gradient.
pub(crate) fn save_plan(op: &Op, needs: &[bool]) -> Vec<SaveSpec> {
    let mut plan = Vec::new();
    match op {
        // (inputs read: rhs when lhs needs grad, lhs when rhs needs grad; outputs read: none)
        Op::Matmul { .. } => {
            if needs[0] {
                plan.push(SaveSpec::Input { role: "rhs", index: 1 });
            }
            if needs[1] {
                plan.push(SaveSpec::Input { role: "lhs", index: 0 });
            }
        }
        // (inputs read: none; outputs read: the probabilities)
        Op::RowSoftmax { .. } => plan.push(SaveSpec::Output { role: "probs" }),
        // (inputs read: x; outputs read: none)
        Op::Elementwise(_) => plan.push(SaveSpec::Input { role: "input", index: 0 }),
        // (inputs read: scale row when x needs grad; internals: normalized x, 1/std)
        Op::LayerNorm { .. } => {
            if needs[0] || needs[1] {
                plan.push(SaveSpec::Internal { role: "normalized" });
            }
            if needs[0] {
                plan.push(SaveSpec::Internal { role: "inv_std" });
                plan.push(SaveSpec::Input { role: "scale", index: 1 });
            }
        }
        // (internals: softmax of the logits)
        Op::CrossEntropy { .. } => plan.push(SaveSpec::Internal { role: "probs" }),
        // shape bookkeeping only
        Op::AddBroadcast
        | Op::RowSelect { .. }
        | Op::ColSlice { .. }
        | Op::ConcatRows
        | Op::ConcatCols
        | Op::MeanRows => {}
    }
    plan
}

pub(crate) struct Forward {
    pub value: Matrix,
    pub internals: Vec<(&'static str, Matrix)>,
}

fn mismatch(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
}

fn arity(op: &'static str, inputs: &[&Matrix], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::ShapeMismatch {
            op,
            lhs: (inputs.len(), 0),
            rhs: (n, 0),
        });
    }
    Ok(())
}

fn promoted(inputs: &[&Matrix]) -> Dtype {
    inputs
        .iter()
        .fold(Dtype::F32, |d, m| d.promote(m.dtype()))
}

pub(crate) fn forward(op: &Op, inputs: &[&Matrix]) -> Result<Forward> {
    let plain = |value| Ok(Forward { value, internals: Vec::new() });
    match op {
        Op::Matmul { transpose_rhs, scale } => {
            arity("matmul", inputs, 2)?;
            plain(gemm(inputs[0], false, inputs[1], *transpose_rhs, *scale)?)
        }
        Op::AddBroadcast => {
            arity("add_broadcast", inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            let dtype = promoted(inputs);
            let mut out = a.to_dtype(dtype);
            if b.shape() == a.shape() {
                for (o, x) in out.data_mut().iter_mut().zip(b.data()) {
                    *o = dtype.round(*o + x);
                }
            } else if b.rows() == 1 && b.cols() == a.cols() {
                let bias = b.row(0);
                for r in 0..a.rows() {
                    for (o, x) in out.row_mut(r).iter_mut().zip(bias) {
                        *o = dtype.round(*o + x);
                    }
                }
            } else {
                return Err(mismatch("add_broadcast", a, b));
            }
            plain(out)
        }
        Op::RowSoftmax { mask } => {
            arity("row_softmax", inputs, 1)?;
            let x = inputs[0];
            if let Some(m) = mask {
                if m.shape() != x.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "row_softmax",
                        lhs: x.shape(),
                        rhs: m.shape(),
                    });
                }
            }
            let dtype = x.dtype();
            let mut out = Matrix::zeros(x.rows(), x.cols(), dtype);
            let ok = |r: usize, c: usize| mask.as_ref().is_none_or(|m| m.allowed(r, c));
            for r in 0..x.rows() {
                let row = x.row(r);
                let mut max = f64::NEG_INFINITY;
                for (c, &v) in row.iter().enumerate() {
                    if ok(r, c) && v > max {
                        max = v;
                    }
                }
                if max == f64::NEG_INFINITY {
                    continue; // fully masked row stays zero
                }
                let o = out.row_mut(r);
                let mut sum = 0.0;
                for (c, &v) in row.iter().enumerate() {
                    if ok(r, c) {
                        let e = (v - max).exp();
                        o[c] = e;
                        sum += e;
                    }
                }
                for v in o.iter_mut() {
                    *v = dtype.round(*v / sum);
                }
            }
            plain(out)
        }
        Op::Elementwise(f) => {
            arity("elementwise", inputs, 1)?;
            plain(inputs[0].map(|x| f.apply(x)))
        }
        Op::LayerNorm { eps } => {
            arity("layer_norm", inputs, 3)?;
            let (x, g, b) = (inputs[0], inputs[1], inputs[2]);
            let d = x.cols();
            if g.shape() != (1, d) {
                return Err(mismatch("layer_norm", x, g));
            }
            if b.shape() != (1, d) {
                return Err(mismatch("layer_norm", x, b));
            }
            let dtype = promoted(inputs);
            let mut normalized = Matrix::zeros(x.rows(), d, dtype);
            let mut inv_std = Matrix::zeros(x.rows(), 1, dtype);
            let mut out = Matrix::zeros(x.rows(), d, dtype);
            for r in 0..x.rows() {
                let row = x.row(r);
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let rstd = dtype.round(1.0 / (var + eps).sqrt());
                inv_std.data_mut()[r] = rstd;
                let nrow = normalized.row_mut(r);
                for (n, v) in nrow.iter_mut().zip(row) {
                    *n = dtype.round((v - mean) * rstd);
                }
                let orow = out.row_mut(r);
                for c in 0..d {
                    orow[c] = dtype.round(normalized.get(r, c) * g.get(0, c) + b.get(0, c));
                }
            }
            Ok(Forward {
                value: out,
                internals: vec![("normalized", normalized), ("inv_std", inv_std)],
            })
        }
        Op::RowSelect { rows } => {
            arity("row_select", inputs, 1)?;
            let x = inputs[0];
            if let Some(&bad) = rows.iter().find(|&&r| r >= x.rows()) {
                return Err(Error::OutOfRange {
                    what: "row_select row",
                    index: bad,
                    limit: x.rows(),
                });
            }
            plain(x.select_rows(rows))
        }
        Op::ColSlice { start, len } => {
            arity("col_slice", inputs, 1)?;
            let x = inputs[0];
            if start + len > x.cols() {
                return Err(Error::OutOfRange {
                    what: "col_slice end",
                    index: start + len,
                    limit: x.cols(),
                });
            }
            let mut data = Vec::with_capacity(x.rows() * len);
            for r in 0..x.rows() {
                data.extend_from_slice(&x.row(r)[*start..start + len]);
            }
            plain(Matrix::from_vec(x.rows(), *len, data, x.dtype())?)
        }
        Op::ConcatRows => {
            let first = inputs.first().ok_or(Error::EmptySelection)?;
            let cols = first.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for m in inputs {
                if m.cols() != cols {
                    return Err(mismatch("concat_rows", first, m));
                }
                rows += m.rows();
                data.extend_from_slice(m.data());
            }
            plain(Matrix::from_vec(rows, cols, data, promoted(inputs))?)
        }
        Op::ConcatCols => {
            let first = inputs.first().ok_or(Error::EmptySelection)?;
            let rows = first.rows();
            let mut cols = 0;
            for m in inputs {
                if m.rows() != rows {
                    return Err(mismatch("concat_cols", first, m));
                }
                cols += m.cols();
            }
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for m in inputs {
                    data.extend_from_slice(m.row(r));
                }
            }
            plain(Matrix::from_vec(rows, cols, data, promoted(inputs))?)
        }
        Op::MeanRows => {
            arity("mean_rows", inputs, 1)?;
            let x = inputs[0];
            if x.rows() == 0 {
                return Err(Error::EmptySelection);
            }
            let mut out = vec![0.0; x.cols()];
            for r in 0..x.rows() {
                for (o, v) in out.iter_mut().zip(x.row(r)) {
                    *o += v;
                }
            }
            let inv = 1.0 / x.rows() as f64;
            plain(Matrix::from_vec(
                1,
                x.cols(),
                out.into_iter().map(|v| v * inv).collect(),
                x.dtype(),
            )?)
        }
        Op::CrossEntropy { targets, scale } => {
            arity("cross_entropy", inputs, 1)?;
            let logits = inputs[0];
            if targets.len() != logits.rows() {
                return Err(Error::ShapeMismatch {
                    op: "cross_entropy",
                    lhs: logits.shape(),
                    rhs: (targets.len(), 1),
                });
            }
            if let Some(&bad) = targets.iter().find(|&&t| t >= logits.cols()) {
                return Err(Error::OutOfRange {
                    what: "cross_entropy target",
                    index: bad,
                    limit: logits.cols(),
                });
            }
            let dtype = logits.dtype();
            let mut probs = Matrix::zeros(logits.rows(), logits.cols(), dtype);
            let mut total = 0.0;
            for (r, &t) in targets.iter().enumerate() {
                let row = logits.row(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let log_z = max + sum.ln();
                total += log_z - row[t];
                for (p, v) in probs.row_mut(r).iter_mut().zip(row) {
                    *p = dtype.round((v - log_z).exp());
                }
            }
            Ok(Forward {
                value: Matrix::from_vec(1, 1, vec![scale * total], dtype)?,
                internals: vec![("probs", probs)],
            })
        }
    }
}

/// Saved tensors handed to a backward rule, looked up by role.
pub(crate) struct SavedView<'t> {
    pub entries: Vec<(&'static str, &'t Matrix)>,
}

impl<'t> SavedView<'t> {
    fn get(&self, role: &str) -> &'t Matrix {
        self.entries
            .iter()
            .find(|(r, _)| *r == role)
            .map(|(_, m)| *m)
            .unwrap_or_else(|| panic!("backward rule read unsaved tensor `{role}`"))
    }
}

/// Gradients for each input (None when the input does not need one).
pub(crate) fn backward(
    op: &Op,
    grad: &Matrix,
    saved: &SavedView<'_>,
    input_shapes: &[(usize, usize)],
    needs: &[bool],
) -> Result<Vec<Option<Matrix>>> {
    let dtype = grad.dtype();
    let mut out: Vec<Option<Matrix>> = vec![None; input_shapes.len()];
    match op {
        Op::Matmul { transpose_rhs, scale } => {
            if needs[0] {
                let rhs = saved.get("rhs");
                // C = s A B  => dA = s dC B^T ; C = s A B^T => dA = s dC B
                out[0] = Some(gemm(grad, false, rhs, !transpose_rhs, *scale)?);
            }
            if needs[1] {
                let lhs = saved.get("lhs");
                out[1] = Some(if *transpose_rhs {
                    gemm(grad, true, lhs, false, *scale)?
                } else {
                    gemm(lhs, true, grad, false, *scale)?
                });
            }
        }
        Op::AddBroadcast => {
            if needs[0] {
                out[0] = Some(grad.clone());
            }
            if needs[1] {
                if input_shapes[1] == grad.shape() {
                    out[1] = Some(grad.clone());
                } else {
                    let mut col = vec![0.0; grad.cols()];
                    for r in 0..grad.rows() {
                        for (c, v) in col.iter_mut().zip(grad.row(r)) {
                            *c += v;
                        }
                    }
                    out[1] = Some(Matrix::from_vec(1, grad.cols(), col, dtype)?);
                }
            }
        }
        Op::RowSoftmax { .. } => {
            let p = saved.get("probs");
            let mut dx = Matrix::zeros(p.rows(), p.cols(), dtype);
            for r in 0..p.rows() {
                let pr = p.row(r);
                let gr = grad.row(r);
                let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                    *d = dtype.round(pr[c] * (gr[c] - dot));
                }
            }
            out[0] = Some(dx);
        }
        Op::Elementwise(f) => {
            let x = saved.get("input");
            let mut dx = grad.clone();
            for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                *d = dtype.round(*d * f.derivative(v));
            }
            out[0] = Some(dx);
        }
        Op::LayerNorm { .. } => {
            let (rows, d) = input_shapes[0];
            if needs[1] || needs[2] || needs[0] {
                if needs[2] {
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for (b, v) in db.iter_mut().zip(grad.row(r)) {
                            *b += v;
                        }
                    }
                    out[2] = Some(Matrix::from_vec(1, d, db, dtype)?);
                }
                if needs[1] {
                    let xhat = saved.get("normalized");
                    let mut dg = vec![0.0; d];
                    for r in 0..rows {
                        for ((g, v), h) in dg.iter_mut().zip(grad.row(r)).zip(xhat.row(r)) {
                            *g += v * h;
                        }
                    }
                    out[1] = Some(Matrix::from_vec(1, d, dg, dtype)?);
                }
                if needs[0] {
                    let xhat = saved.get("normalized");
                    let rstd = saved.get("inv_std");
                    let gamma = saved.get("scale");
                    let mut dx = Matrix::zeros(rows, d, dtype);
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let gr = grad.row(r);
                        let hr = xhat.row(r);
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for c in 0..d {
                            dxhat[c] = gr[c] * gamma.get(0, c);
                            mean_d += dxhat[c];
                            mean_dh += dxhat[c] * hr[c];
                        }
                        mean_d /= d as f64;
                        mean_dh /= d as f64;
                        let s = rstd.get(r, 0);
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = dtype.round(s * (dxhat[c] - mean_d - hr[c] * mean_dh));
                        }
                    }
                    out[0] = Some(dx);
                }
            }
        }
        Op::RowSelect { rows } => {
            let (n, c) = input_shapes[0];
            let mut dx = Matrix::zeros(n, c, dtype);
            for (i, &r) in rows.iter().enumerate() {
                for (o, v) in dx.row_mut(r).iter_mut().zip(grad.row(i)) {
                    *o = dtype.round(*o + v);
                }
            }
            out[0] = Some(dx);
        }
        Op::ColSlice { start, len } => {
            let (n, c) = input_shapes[0];
            let mut dx = Matrix::zeros(n, c, dtype);
            for r in 0..n {
                dx.row_mut(r)[*start..start + len].copy_from_slice(grad.row(r));
            }
            out[0] = Some(dx);
        }
        Op::ConcatRows => {
            let mut offset = 0;
            for (i, &(r, c)) in input_shapes.iter().enumerate() {
                if needs[i] {
                    let rows: Vec<usize> = (offset..offset + r).collect();
                    let mut g = grad.select_rows(&rows);
                    debug_assert_eq!(g.cols(), c);
                    g.round_in_place();
                    out[i] = Some(g);
                }
                offset += r;
            }
        }
        Op::ConcatCols => {
            let mut offset = 0;
            for (i, &(r, c)) in input_shapes.iter().enumerate() {
                if needs[i] {
                    let mut data = Vec::with_capacity(r * c);
                    for row in 0..r {
                        data.extend_from_slice(&grad.row(row)[offset..offset + c]);
                    }
                    out[i] = Some(Matrix::from_vec(r, c, data, dtype)?);
                }
                offset += c;
            }
        }
        Op::MeanRows => {
            let (n, c) = input_shapes[0];
            let inv = 1.0 / n as f64;
            let mut dx = Matrix::zeros(n, c, dtype);
            for r in 0..n {
                for (o, v) in dx.row_mut(r).iter_mut().zip(grad.row(0)) {
                    *o = dtype.round(v * inv);
                }
            }
            out[0] = Some(dx);
        }
        Op::CrossEntropy { targets, scale } => {
            let probs = saved.get("probs");
            let s = scale * grad.get(0, 0);
            let mut dx = probs.clone();
            for (r, &t) in targets.iter().enumerate() {
                let row = dx.row_mut(r);
                row[t] -= 1.0;
                for v in row.iter_mut() {
                    *v = dtype.round(*v * s);
                }
            }
            out[0] = Some(dx);
        }
    }
    Ok(out)
}
