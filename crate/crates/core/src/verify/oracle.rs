//! Reference gradients for token-selective training.
//!
//! The unsplit model is evaluated with every per-row tensor passed through
//! [`StopGrad::rows`]: selected rows stay tracked and every other row is
//! replaced by a constant copy. Differentiating this graph with full
//! tracking gives the gradients token-selective training should produce.
//! It is written directly against the primitive set and shares no forward
//! code with the model or the token-selective pass.
//!
//! In *frozen* mode the constant rows come from a snapshot taken at a fixed
//! parameter point instead of the current parameters. The frozen loss is a
//! function whose ordinary derivative at the snapshot point equals the
//! token-selective gradient, so it can be checked by finite differences.

use crate::autodiff::{Mask, ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::transformer::{Head, Target, TokenSequence, TransformerModel};

/// Values of every stopped tensor, in evaluation order.
#[derive(Clone, Debug, Default)]
pub struct Snapshot {
    values: Vec<Matrix>,
}

enum Mode<'s> {
    Live,
    Record(Vec<Matrix>),
    Frozen(&'s Snapshot, usize),
}

struct StopGrad<'s> {
    rows_g: Vec<usize>,
    rows_u: Vec<usize>,
    inverse: Vec<usize>,
    mode: Mode<'s>,
}

impl StopGrad<'_> {
    fn rows(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let current = tape.value(x).clone();
        let source = match &mut self.mode {
            Mode::Live => current,
            Mode::Record(out) => {
                out.push(current.clone());
                current
            }
            Mode::Frozen(snap, i) => {
                let m = snap.values.get(*i).cloned().ok_or_else(|| {
                    Error::InvalidConfig("snapshot does not match this computation".into())
                })?;
                *i += 1;
                m
            }
        };
        let g = tape.select_rows(x, &self.rows_g)?;
        let u = tape.constant(source.select_rows(&self.rows_u));
        let cat = tape.concat_rows(&[g, u])?;
        tape.select_rows(cat, &self.inverse)
    }
}

fn mask(seq: &TokenSequence, causal: bool) -> Mask {
    let n = seq.len();
    Mask::from_fn(n, n, |i, j| seq.real[j] && (!causal || seq.positions[j] <= seq.positions[i]))
}

struct Ctx<'m> {
    model: &'m TransformerModel,
    vars: Vec<Var>,
}

impl Ctx<'_> {
    fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// `x W (+ s x A B) (+ b)`
    fn dense(&self, tape: &mut Tape, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var> {
        let mut y = tape.matmul(x, self.p(w))?;
        if let Some(set) = &self.model.adapters {
            if !set.merged {
                if let Some(e) = set.entries.iter().find(|e| e.base == w) {
                    let xa = tape.matmul(x, self.p(e.a))?;
                    let delta = tape.matmul_scaled(xa, self.p(e.b), e.scaling)?;
                    y = tape.add(y, delta)?;
                }
            }
        }
        match b {
            Some(b) => tape.add(y, self.p(b)),
            None => Ok(y),
        }
    }
}

fn loss_with<'a>(
    tape: &mut Tape<'a>,
    model: &'a TransformerModel,
    seq: &TokenSequence,
    target: &Target,
    selected: &[usize],
    stop: &mut StopGrad,
) -> Result<Var> {
    let cfg = &model.config;
    let ctx = Ctx {
        model,
        vars: model
            .params
            .iter()
            .map(|(id, p)| tape.param(id, &p.value, !p.frozen))
            .collect(),
    };
    let tok = tape.select_rows(ctx.p(model.token_embedding), &seq.ids)?;
    let pos = tape.select_rows(ctx.p(model.position_embedding), &seq.positions)?;
    let e = tape.add(tok, pos)?;
    let mut x = stop.rows(tape, e)?;
    let m = mask(seq, cfg.causal);
    let dh = cfg.d_model / cfg.n_heads;
    for l in &model.layers {
        let n1 = tape.layer_norm(x, ctx.p(l.norm1_scale), ctx.p(l.norm1_shift))?;
        let n1 = stop.rows(tape, n1)?;
        let q = ctx.dense(tape, n1, l.w_q, Some(l.b_q))?;
        let q = stop.rows(tape, q)?;
        let k = ctx.dense(tape, n1, l.w_k, Some(l.b_k))?;
        let k = stop.rows(tape, k)?;
        let v = ctx.dense(tape, n1, l.w_v, Some(l.b_v))?;
        let v = stop.rows(tape, v)?;
        let mut heads = Vec::new();
        for h in 0..cfg.n_heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let s = tape.matmul_t(qh, kh, 1.0 / (dh as f64).sqrt())?;
            let p = tape.softmax(s, Some(m.clone()))?;
            heads.push(tape.matmul(p, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        let cat = stop.rows(tape, cat)?;
        let o = ctx.dense(tape, cat, l.w_o, Some(l.b_o))?;
        let o = stop.rows(tape, o)?;
        let r = tape.add(x, o)?;
        x = stop.rows(tape, r)?;
        let n2 = tape.layer_norm(x, ctx.p(l.norm2_scale), ctx.p(l.norm2_shift))?;
        let n2 = stop.rows(tape, n2)?;
        let z = ctx.dense(tape, n2, l.w1, Some(l.b1))?;
        let z = stop.rows(tape, z)?;
        let a = tape.gelu(z)?;
        let a = stop.rows(tape, a)?;
        let f = ctx.dense(tape, a, l.w2, Some(l.b2))?;
        let f = stop.rows(tape, f)?;
        let r = tape.add(x, f)?;
        x = stop.rows(tape, r)?;
    }
    let hs = tape.select_rows(x, selected)?;
    match (target, model.head) {
        (Target::Class(label), Head::Classifier { w1, b1, w2, b2 }) => {
            if *label >= cfg.n_classes {
                return Err(Error::InvalidLabel { label: *label, n_classes: cfg.n_classes });
            }
            let pooled = tape.mean_rows(hs)?;
            let z = ctx.dense(tape, pooled, w1, Some(b1))?;
            let a = tape.gelu(z)?;
            let logits = ctx.dense(tape, a, w2, Some(b2))?;
            tape.cross_entropy(logits, &[*label], 1.0)
        }
        (Target::Next(targets), Head::Lm { w_lm }) => {
            let t = selected
                .iter()
                .map(|&r| targets.get(r).copied().flatten().ok_or(Error::EmptySelection))
                .collect::<Result<Vec<_>>>()?;
            let logits = ctx.dense(tape, hs, w_lm, None)?;
            tape.cross_entropy(logits, &t, 1.0)
        }
        _ => Err(Error::InvalidConfig("target does not match the model head".into())),
    }
}

fn stopper<'s>(n: usize, selected: &[usize], mode: Mode<'s>) -> Result<StopGrad<'s>> {
    if selected.is_empty() {
        return Err(Error::EmptySelection);
    }
    let mut is_sel = vec![false; n];
    for &r in selected {
        if r >= n {
            return Err(Error::OutOfRange { what: "selected row", index: r, limit: n });
        }
        is_sel[r] = true;
    }
    let rows_g: Vec<usize> = (0..n).filter(|&r| is_sel[r]).collect();
    let rows_u: Vec<usize> = (0..n).filter(|&r| !is_sel[r]).collect();
    let mut inverse = vec![0; n];
    for (i, &r) in rows_g.iter().chain(&rows_u).enumerate() {
        inverse[r] = i;
    }
    Ok(StopGrad { rows_g, rows_u, inverse, mode })
}

/// Loss of the stop-gradient reference; with `frozen`, unselected rows
/// come from that snapshot.
pub fn stopgrad_loss<'a>(
    tape: &mut Tape<'a>,
    model: &'a TransformerModel,
    seq: &TokenSequence,
    target: &Target,
    selected: &[usize],
    frozen: Option<&Snapshot>,
) -> Result<Var> {
    let mode = match frozen {
        Some(s) => Mode::Frozen(s, 0),
        None => Mode::Live,
    };
    let mut stop = stopper(seq.len(), selected, mode)?;
    loss_with(tape, model, seq, target, selected, &mut stop)
}

/// Records the stopped tensors at the model's current parameters.
pub fn snapshot(
    model: &TransformerModel,
    seq: &TokenSequence,
    target: &Target,
    selected: &[usize],
) -> Result<Snapshot> {
    let mut stop = stopper(seq.len(), selected, Mode::Record(Vec::new()))?;
    let mut tape = Tape::new(model.dtype());
    loss_with(&mut tape, model, seq, target, selected, &mut stop)?;
    match stop.mode {
        Mode::Record(values) => Ok(Snapshot { values }),
        _ => unreachable!("recording mode"),
    }
}

/// Gradients of the stop-gradient reference.
pub fn stopgrad_reference_backward(
    model: &TransformerModel,
    seq: &TokenSequence,
    target: &Target,
    selected: &[usize],
) -> Result<crate::autodiff::GradStore> {
    let mut tape = Tape::new(model.dtype());
    let loss = stopgrad_loss(&mut tape, model, seq, target, selected, None)?;
    tape.backward(loss)
}
