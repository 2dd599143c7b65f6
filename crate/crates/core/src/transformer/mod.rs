//! Pre-norm transformer built from the autodiff primitives.
//!
//! Positions are looked up by the original position id carried with each
//! row, and attention masks are derived from those ids, so any storage
//! order of the rows computes the same values.

pub mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterSet;
use crate::autodiff::{Mask, ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::{Dtype, Matrix};

pub use checkpoint::{load_checkpoint, save_checkpoint};

pub const PAD_ID: usize = 0;

fn default_init_std() -> f64 {
    0.02
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_positions: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    /// Causal models carry an LM head, bidirectional ones a classifier.
    pub causal: bool,
    #[serde(default)]
    pub n_classes: usize,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.vocab_size == 0 || self.max_positions == 0 || self.d_model == 0 {
            return bad("vocab_size, max_positions and d_model must be >= 1");
        }
        if self.n_heads == 0 || self.d_ff == 0 {
            return bad("n_heads and d_ff must be >= 1");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if !self.causal && self.n_classes == 0 {
            return bad("a classifier needs n_classes >= 1");
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return bad("init_std must be finite and non-negative");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Token ids with their original positions and a padding mask (true = real token).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub real: Vec<bool>,
}

impl TokenSequence {
    /// Unpadded sequence at positions `0..n`.
    pub fn new(ids: Vec<usize>) -> Self {
        let n = ids.len();
        Self {
            ids,
            positions: (0..n).collect(),
            real: vec![true; n],
        }
    }

    /// Right-pads `ids` with [`PAD_ID`] to `len`.
    pub fn padded(mut ids: Vec<usize>, len: usize) -> Self {
        let n = ids.len().min(len);
        ids.truncate(n);
        ids.resize(len, PAD_ID);
        Self {
            ids,
            positions: (0..len).collect(),
            real: (0..len).map(|i| i < n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn unpadded(&self) -> usize {
        self.real.iter().filter(|&&r| r).count()
    }

    /// Applies a storage permutation: row `i` of the result is row `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            ids: order.iter().map(|&i| self.ids[i]).collect(),
            positions: order.iter().map(|&i| self.positions[i]).collect(),
            real: order.iter().map(|&i| self.real[i]).collect(),
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.positions.len() != self.ids.len() || self.real.len() != self.ids.len() {
            return Err(Error::ShapeMismatch {
                op: "token_sequence",
                lhs: (self.ids.len(), 1),
                rhs: (self.positions.len(), self.real.len()),
            });
        }
        for &id in &self.ids {
            if id >= config.vocab_size {
                return Err(Error::OutOfRange {
                    what: "token id",
                    index: id,
                    limit: config.vocab_size,
                });
            }
        }
        for &p in &self.positions {
            if p >= config.max_positions {
                return Err(Error::OutOfRange {
                    what: "position",
                    index: p,
                    limit: config.max_positions,
                });
            }
        }
        Ok(())
    }
}

/// Mask for queries at `q_pos` over keys at `k_pos`: a key is visible when it
/// is a real token and, for causal models, not after the query.
pub fn attention_mask(q_pos: &[usize], k_pos: &[usize], k_real: &[bool], causal: bool) -> Mask {
    Mask::from_fn(q_pos.len(), k_pos.len(), |i, j| {
        k_real[j] && (!causal || k_pos[j] <= q_pos[i])
    })
}

/// Row-wise log-softmax of a matrix of logits.
pub fn log_softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        for x in row.iter_mut() {
            *x -= lse;
        }
    }
    out.round_in_place();
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub frozen: bool,
}

/// Named parameter tensors indexed by [`ParamId`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, value: Matrix, frozen: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            frozen,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.iter().filter(|(_, p)| !p.frozen)
    }

    /// Total element count, optionally restricted to trainable parameters.
    pub fn elements(&self, trainable_only: bool) -> usize {
        self.params
            .iter()
            .filter(|p| !trainable_only || !p.frozen)
            .map(|p| p.value.len())
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerParams {
    pub norm1_scale: ParamId,
    pub norm1_shift: ParamId,
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_k: ParamId,
    pub b_k: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub norm2_scale: ParamId,
    pub norm2_shift: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// One hidden layer of width d_model with GELU.
    Classifier {
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
    },
    Lm { w_lm: ParamId },
}

/// Parameters of one model registered on a tape, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub layers: Vec<LayerParams>,
    pub head: Head,
    pub adapters: Option<AdapterSet>,
}

impl TransformerModel {
    /// Randomly initialized model: weights normal(0, init_std), biases and
    /// norm shifts zero, norm scales one.
    pub fn new(config: ModelConfig, dtype: Dtype, seed: u64) -> Result<Self> {
        config.validate()?;
        let std = config.init_std;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let mut weight = |r: usize, c: usize| {
            let data = (0..r * c).map(|_| normal.sample(&mut rng)).collect();
            Matrix::from_vec(r, c, data, dtype).expect("length matches")
        };
        Self::build(config, dtype, &mut weight)
    }

    /// Model with every weight zero (norm scales one).
    pub fn zeros(config: ModelConfig, dtype: Dtype) -> Result<Self> {
        config.validate()?;
        Self::build(config, dtype, &mut |r, c| Matrix::zeros(r, c, dtype))
    }

    fn build(
        config: ModelConfig,
        dtype: Dtype,
        weight: &mut dyn FnMut(usize, usize) -> Matrix,
    ) -> Result<Self> {
        let d = config.d_model;
        let mut params = ParamStore::default();
        let zeros = |c: usize| Matrix::zeros(1, c, dtype);
        let ones = |c: usize| Matrix::filled(1, c, 1.0, dtype);
        let token_embedding = params.push("embed.token", weight(config.vocab_size, d), false);
        let position_embedding =
            params.push("embed.position", weight(config.max_positions, d), false);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            layers.push(LayerParams {
                norm1_scale: params.push(p("norm1.scale"), ones(d), false),
                norm1_shift: params.push(p("norm1.shift"), zeros(d), false),
                w_q: params.push(p("attn.w_q"), weight(d, d), false),
                b_q: params.push(p("attn.b_q"), zeros(d), false),
                w_k: params.push(p("attn.w_k"), weight(d, d), false),
                // softmax is invariant to a per-query shift, so this bias has
                // an identically zero gradient; it is kept frozen
                b_k: params.push(p("attn.b_k"), zeros(d), true),
                w_v: params.push(p("attn.w_v"), weight(d, d), false),
                b_v: params.push(p("attn.b_v"), zeros(d), false),
                w_o: params.push(p("attn.w_o"), weight(d, d), false),
                b_o: params.push(p("attn.b_o"), zeros(d), false),
                norm2_scale: params.push(p("norm2.scale"), ones(d), false),
                norm2_shift: params.push(p("norm2.shift"), zeros(d), false),
                w1: params.push(p("ffn.w1"), weight(d, config.d_ff), false),
                b1: params.push(p("ffn.b1"), zeros(config.d_ff), false),
                w2: params.push(p("ffn.w2"), weight(config.d_ff, d), false),
                b2: params.push(p("ffn.b2"), zeros(d), false),
            });
        }
        let head = if config.causal {
            Head::Lm {
                w_lm: params.push("head.w_lm", weight(d, config.vocab_size), false),
            }
        } else {
            Head::Classifier {
                w1: params.push("head.w1", weight(d, d), false),
                b1: params.push("head.b1", zeros(d), false),
                w2: params.push("head.w2", weight(d, config.n_classes), false),
                b2: params.push("head.b2", zeros(config.n_classes), false),
            }
        };
        Ok(Self {
            config,
            params,
            token_embedding,
            position_embedding,
            layers,
            head,
            adapters: None,
        })
    }

    pub fn dtype(&self) -> Dtype {
        self.params.value(self.token_embedding).dtype()
    }

    /// Copy with every parameter converted to `dtype`.
    pub fn to_dtype(&self, dtype: Dtype) -> Self {
        let mut m = self.clone();
        for p in &mut m.params.params {
            p.value = p.value.to_dtype(dtype);
        }
        m
    }

    /// Registers every parameter on `tape`; frozen ones are untracked leaves.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(id, p)| tape.param(id, &p.value, !p.frozen))
            .collect();
        Bound { vars }
    }

    /// `x W + b`, plus the low-rank delta when `w` carries an unmerged adapter.
    pub fn linear(
        &self,
        tape: &mut Tape,
        b: &Bound,
        x: Var,
        w: ParamId,
        bias: Option<ParamId>,
    ) -> Result<Var> {
        let mut y = tape.matmul(x, b.var(w))?;
        if let Some(entry) = self.adapters.as_ref().and_then(|a| a.active(w)) {
            let xa = tape.matmul(x, b.var(entry.a))?;
            let delta = tape.matmul_scaled(xa, b.var(entry.b), entry.scaling)?;
            y = tape.add(y, delta)?;
        }
        match bias {
            Some(bias) => tape.add(y, b.var(bias)),
            None => Ok(y),
        }
    }

    /// Row `i` is `token_embedding[ids[i]] + position_embedding[positions[i]]`.
    pub fn embed(&self, tape: &mut Tape, b: &Bound, seq: &TokenSequence) -> Result<Var> {
        seq.validate(&self.config)?;
        let tok = tape.select_rows(b.var(self.token_embedding), &seq.ids)?;
        let pos = tape.select_rows(b.var(self.position_embedding), &seq.positions)?;
        tape.add(tok, pos)
    }

    /// Multi-head attention of queries `q` over keys/values `k`, `v` (all
    /// already projected), followed by the output projection.
    pub fn attend(
        &self,
        tape: &mut Tape,
        b: &Bound,
        layer: usize,
        (q, k, v): (Var, Var, Var),
        mask: &Mask,
    ) -> Result<Var> {
        let p = &self.layers[layer];
        let heads = self.config.n_heads;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * dh, dh)?,
                    tape.slice_cols(k, h * dh, dh)?,
                    tape.slice_cols(v, h * dh, dh)?,
                )
            };
            let scores = tape.matmul_t(qh, kh, scale)?;
            let probs = tape.softmax(scores, Some(mask.clone()))?;
            outs.push(tape.matmul(probs, vh)?);
        }
        let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        self.linear(tape, b, cat, p.w_o, Some(p.b_o))
    }

    /// Standard multi-head self-attention over `h` (no residual, no norm).
    pub fn attention(
        &self,
        tape: &mut Tape,
        b: &Bound,
        layer: usize,
        h: Var,
        positions: &[usize],
        real: &[bool],
    ) -> Result<Var> {
        let p = &self.layers[layer];
        let q = self.linear(tape, b, h, p.w_q, Some(p.b_q))?;
        let k = self.linear(tape, b, h, p.w_k, Some(p.b_k))?;
        let v = self.linear(tape, b, h, p.w_v, Some(p.b_v))?;
        let mask = attention_mask(positions, positions, real, self.config.causal);
        self.attend(tape, b, layer, (q, k, v), &mask)
    }

    /// `W2 gelu(W1 h + b1) + b2`
    pub fn ffn(&self, tape: &mut Tape, b: &Bound, layer: usize, h: Var) -> Result<Var> {
        let p = &self.layers[layer];
        let z = self.linear(tape, b, h, p.w1, Some(p.b1))?;
        let a = tape.gelu(z)?;
        self.linear(tape, b, a, p.w2, Some(p.b2))
    }

    /// Pre-norm residual block.
    pub fn layer_forward(
        &self,
        tape: &mut Tape,
        b: &Bound,
        layer: usize,
        h: Var,
        positions: &[usize],
        real: &[bool],
    ) -> Result<Var> {
        let p = &self.layers[layer];
        tape.set_layer(Some(layer));
        let out = (|| {
            let n1 = tape.layer_norm(h, b.var(p.norm1_scale), b.var(p.norm1_shift))?;
            let att = self.attention(tape, b, layer, n1, positions, real)?;
            let h = tape.add(h, att)?;
            let n2 = tape.layer_norm(h, b.var(p.norm2_scale), b.var(p.norm2_shift))?;
            let f = self.ffn(tape, b, layer, n2)?;
            tape.add(h, f)
        })();
        tape.set_layer(None);
        out
    }

    /// Final hidden states, one row per sequence row in storage order.
    pub fn forward(&self, tape: &mut Tape, b: &Bound, seq: &TokenSequence) -> Result<Var> {
        let mut h = self.embed(tape, b, seq)?;
        for l in 0..self.layers.len() {
            h = self.layer_forward(tape, b, l, h, &seq.positions, &seq.real)?;
        }
        Ok(h)
    }

    fn classifier(&self) -> Result<(ParamId, ParamId, ParamId, ParamId)> {
        match self.head {
            Head::Classifier { w1, b1, w2, b2 } => Ok((w1, b1, w2, b2)),
            Head::Lm { .. } => Err(Error::InvalidConfig("model has no classifier head".into())),
        }
    }

    /// Classifier logits of a pooled `1 x d` row.
    pub fn classifier_logits(&self, tape: &mut Tape, b: &Bound, pooled: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = self.classifier()?;
        let z = self.linear(tape, b, pooled, w1, Some(b1))?;
        let a = tape.gelu(z)?;
        self.linear(tape, b, a, w2, Some(b2))
    }

    /// Logits from the mean of the selected rows (training-time pooling).
    pub fn classify_pool_train(&self, tape: &mut Tape, b: &Bound, h_selected: Var) -> Result<Var> {
        if tape.value(h_selected).rows() == 0 {
            return Err(Error::EmptySelection);
        }
        let pooled = tape.mean_rows(h_selected)?;
        self.classifier_logits(tape, b, pooled)
    }

    /// Logits from the mean over every real row (evaluation-time pooling).
    pub fn classify_pool_eval(
        &self,
        tape: &mut Tape,
        b: &Bound,
        h: Var,
        real: &[bool],
    ) -> Result<Var> {
        let rows: Vec<usize> = (0..real.len()).filter(|&i| real[i]).collect();
        if rows.is_empty() {
            return Err(Error::NoUnpaddedPositions);
        }
        let kept = if rows.len() == real.len() { h } else { tape.select_rows(h, &rows)? };
        let pooled = tape.mean_rows(kept)?;
        self.classifier_logits(tape, b, pooled)
    }

    pub fn lm_logits(&self, tape: &mut Tape, b: &Bound, h_rows: Var) -> Result<Var> {
        match self.head {
            Head::Lm { w_lm } => self.linear(tape, b, h_rows, w_lm, None),
            Head::Classifier { .. } => Err(Error::InvalidConfig("model has no LM head".into())),
        }
    }

    /// Cross-entropy of the whole sequence under plain (full) fine-tuning:
    /// mean-pooled classification, or summed next-token loss over every row
    /// that has a target.
    pub fn plain_loss(
        &self,
        tape: &mut Tape,
        b: &Bound,
        seq: &TokenSequence,
        target: &Target,
    ) -> Result<Var> {
        let h = self.forward(tape, b, seq)?;
        match target {
            Target::Class(label) => {
                check_label(*label, self.config.n_classes)?;
                let logits = self.classify_pool_eval(tape, b, h, &seq.real)?;
                tape.cross_entropy(logits, &[*label], 1.0)
            }
            Target::Next(targets) => {
                let rows: Vec<usize> =
                    (0..targets.len()).filter(|&r| targets[r].is_some()).collect();
                if rows.is_empty() {
                    return Err(Error::EmptySelection);
                }
                let hs = if rows.len() == seq.len() { h } else { tape.select_rows(h, &rows)? };
                let logits = self.lm_logits(tape, b, hs)?;
                let t: Vec<usize> = rows.iter().filter_map(|&r| targets[r]).collect();
                tape.cross_entropy(logits, &t, 1.0)
            }
        }
    }
}

/// Supervision for one sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Target {
    Class(usize),
    /// `targets[r]` is the token predicted at row `r`, if any.
    Next(Vec<Option<usize>>),
}

pub(crate) fn check_label(label: usize, n_classes: usize) -> Result<()> {
    if label >= n_classes {
        return Err(Error::InvalidLabel { label, n_classes });
    }
    Ok(())
}
