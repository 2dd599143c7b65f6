//! Token-selective forward pass.
//!
//! The rows of a sequence are split into a selected group `G` (tracked)
//! and its complement (computed under a disabled scope). Every layer runs
//! both groups: the selected rows attend over the keys and values of all
//! rows, but the unselected keys and values enter as constants, so the
//! backward pass and the activation cache only ever involve `k` rows.
//!
//! Storage order inside a split is `[G, complement]`; keys and values are
//! concatenated as `[complement, G]`. Attention masks are always built from
//! the original position ids, never from storage order.
//!
//! In LM mode a selected row `r` is a *context row*: it predicts the token
//! at position `r + 1`.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::transformer::{attention_mask, check_label, Bound, Target, TokenSequence, TransformerModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    Classification,
    Lm,
}

/// Number of selected positions, absolute or as a fraction of the selectable rows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KSpec {
    Count(usize),
    Ratio(f64),
    /// Every selectable row.
    All,
}

impl KSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KSpec::Count(0) => Err(Error::EmptySelection),
            KSpec::Ratio(r) if !(r > 0.0 && r <= 1.0) => {
                Err(Error::InvalidConfig(format!("selection ratio {r} outside (0, 1]")))
            }
            _ => Ok(()),
        }
    }

    /// Requested count for `available` selectable rows (ratio rounds half up, minimum 1).
    pub fn resolve(&self, available: usize) -> usize {
        match *self {
            KSpec::Count(k) => k,
            KSpec::Ratio(r) => ((r * available as f64 + 0.5).floor() as usize).max(1),
            KSpec::All => available.max(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenPartition {
    /// Selected rows, sorted.
    pub selected: Vec<usize>,
    /// Real rows that were not selected, sorted.
    pub unselected: Vec<usize>,
    pub k: usize,
    pub requested: usize,
    /// True when `requested` exceeded the selectable rows.
    pub clamped: bool,
    pub seed: u64,
}

/// Rows that may be selected: every real row for classification; for LM
/// every real row whose successor is a real token.
pub fn selectable_rows(real: &[bool], mode: TaskMode) -> Vec<usize> {
    let n = real.len();
    (0..n)
        .filter(|&r| real[r] && (mode == TaskMode::Classification || (r + 1 < n && real[r + 1])))
        .collect()
}

/// Uniformly samples `k` rows without replacement; classification always keeps row 0.
pub fn select_positions(
    real: &[bool],
    k: KSpec,
    mode: TaskMode,
    seed: u64,
) -> Result<TokenPartition> {
    k.validate()?;
    let pool = selectable_rows(real, mode);
    if pool.is_empty() {
        return Err(Error::NoUnpaddedPositions);
    }
    if mode == TaskMode::Classification && pool[0] != 0 {
        return Err(Error::InvalidConfig("classification requires a real token at position 0".into()));
    }
    let requested = k.resolve(pool.len());
    let k = requested.min(pool.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected: Vec<usize> = match mode {
        TaskMode::Classification => {
            let rest = &pool[1..];
            let mut s: Vec<usize> = sample(&mut rng, rest.len(), k - 1).into_iter().map(|i| rest[i]).collect();
            s.push(0);
            s
        }
        TaskMode::Lm => sample(&mut rng, pool.len(), k).into_iter().map(|i| pool[i]).collect(),
    };
    selected.sort_unstable();
    let unselected = (0..real.len())
        .filter(|&r| real[r] && selected.binary_search(&r).is_err())
        .collect();
    Ok(TokenPartition {
        selected,
        unselected,
        k,
        requested,
        clamped: requested > k,
        seed,
    })
}

/// Seed of the partition for one example in one epoch.
pub fn partition_seed(base: u64, epoch: u64, example: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    splitmix(splitmix(splitmix(base) ^ epoch) ^ example)
}

/// Deliberate defects used to check that the verification suite notices them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InjectedBug {
    /// Unselected keys and values are recorded with tracking on.
    TrackUnselectedKv,
    /// Unselected rows save their inputs as if they were tracked.
    CacheUnselectedRows,
    /// Causal masks are built from storage order instead of positions.
    MaskFromStorageOrder,
}

impl InjectedBug {
    pub const ALL: [InjectedBug; 3] = [
        InjectedBug::TrackUnselectedKv,
        InjectedBug::CacheUnselectedRows,
        InjectedBug::MaskFromStorageOrder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InjectedBug::TrackUnselectedKv => "track-unselected-kv",
            InjectedBug::CacheUnselectedRows => "cache-unselected-rows",
            InjectedBug::MaskFromStorageOrder => "mask-from-storage-order",
        }
    }
}

impl fmt::Display for InjectedBug {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InjectedBug {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown injected bug `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Options {
    pub bug: Option<InjectedBug>,
}

impl Options {
    fn has(&self, bug: InjectedBug) -> bool {
        self.bug == Some(bug)
    }
}

/// Hidden rows split into the selected group and the rest.
#[derive(Clone, Debug)]
pub struct SplitHidden {
    pub g: Var,
    pub u: Var,
    /// Original row of each stored `g` row.
    pub rows_g: Vec<usize>,
    /// Original row of each stored `u` row (unselected real rows and padding).
    pub rows_u: Vec<usize>,
}

impl SplitHidden {
    pub fn n(&self) -> usize {
        self.rows_g.len() + self.rows_u.len()
    }

    fn pick<T: Copy>(rows: &[usize], v: &[T]) -> Vec<T> {
        rows.iter().map(|&r| v[r]).collect()
    }
}

fn unselected<'t, 'a, R>(tape: &'t mut Tape<'a>, opts: &Options, body: impl FnOnce(&mut Tape<'a>) -> R) -> R {
    let cache = opts.has(InjectedBug::CacheUnselectedRows);
    tape.with_grad_disabled(|t| {
        t.set_cache_untracked(cache);
        let out = body(t);
        t.set_cache_untracked(false);
        out
    })
}

/// Splits `h` (one row per sequence row) into `[G, complement]`.
pub fn split_reorder(tape: &mut Tape, h: Var, partition: &TokenPartition) -> Result<SplitHidden> {
    let n = tape.value(h).rows();
    if partition.selected.is_empty() {
        return Err(Error::EmptySelection);
    }
    if let Some(&bad) = partition.selected.iter().chain(&partition.unselected).find(|&&r| r >= n) {
        return Err(Error::OutOfRange { what: "partition row", index: bad, limit: n });
    }
    let rows_g = partition.selected.clone();
    let rows_u: Vec<usize> = (0..n).filter(|r| rows_g.binary_search(r).is_err()).collect();
    let g = tape.select_rows(h, &rows_g)?;
    let u = tape.with_grad_disabled(|t| t.select_rows(h, &rows_u))?;
    Ok(SplitHidden { g, u, rows_g, rows_u })
}

/// Inverse of [`split_reorder`]: rows back in their original order.
pub fn restore_order(tape: &mut Tape, split: &SplitHidden) -> Result<Var> {
    let n = split.n();
    let mut inverse = vec![0; n];
    for (i, &r) in split.rows_g.iter().chain(&split.rows_u).enumerate() {
        inverse[r] = i;
    }
    let cat = tape.concat_rows(&[split.g, split.u])?;
    tape.select_rows(cat, &inverse)
}

/// Positions used for masking each group; storage order under the mask bug.
fn mask_positions(split: &SplitHidden, seq: &TokenSequence, opts: &Options) -> (Vec<usize>, Vec<usize>) {
    if opts.has(InjectedBug::MaskFromStorageOrder) {
        let k = split.rows_g.len();
        ((0..k).collect(), (k..split.n()).collect())
    } else {
        (SplitHidden::pick(&split.rows_g, &seq.positions), SplitHidden::pick(&split.rows_u, &seq.positions))
    }
}

/// Attention sublayer on an already normalized split (no residual).
pub fn tokentune_attention(
    tape: &mut Tape,
    model: &TransformerModel,
    b: &Bound,
    layer: usize,
    x: &SplitHidden,
    seq: &TokenSequence,
    opts: &Options,
) -> Result<SplitHidden> {
    let p = model.layers[layer];
    let causal = model.config.causal;
    let q_g = model.linear(tape, b, x.g, p.w_q, Some(p.b_q))?;
    let k_g = model.linear(tape, b, x.g, p.w_k, Some(p.b_k))?;
    let v_g = model.linear(tape, b, x.g, p.w_v, Some(p.b_v))?;
    let kv_u = |t: &mut Tape| -> Result<(Var, Var)> {
        Ok((
            model.linear(t, b, x.u, p.w_k, Some(p.b_k))?,
            model.linear(t, b, x.u, p.w_v, Some(p.b_v))?,
        ))
    };
    let (k_u, v_u) = if opts.has(InjectedBug::TrackUnselectedKv) {
        kv_u(tape)?
    } else {
        unselected(tape, opts, kv_u)?
    };
    let keys = tape.concat_rows(&[k_u, k_g])?;
    let values = tape.concat_rows(&[v_u, v_g])?;
    let (pos_g, pos_u) = mask_positions(x, seq, opts);
    let key_pos: Vec<usize> = pos_u.iter().chain(&pos_g).copied().collect();
    let key_real: Vec<bool> = x.rows_u.iter().chain(&x.rows_g).map(|&r| seq.real[r]).collect();

    let mask_g = attention_mask(&pos_g, &key_pos, &key_real, causal);
    let out_g = model.attend(tape, b, layer, (q_g, keys, values), &mask_g)?;
    let mask_u = attention_mask(&pos_u, &key_pos, &key_real, causal);
    let out_u = unselected(tape, opts, |t| {
        let q_u = model.linear(t, b, x.u, p.w_q, Some(p.b_q))?;
        model.attend(t, b, layer, (q_u, keys, values), &mask_u)
    })?;
    Ok(SplitHidden { g: out_g, u: out_u, rows_g: x.rows_g.clone(), rows_u: x.rows_u.clone() })
}

/// Feed-forward sublayer on an already normalized split (no residual).
pub fn tokentune_ffn(
    tape: &mut Tape,
    model: &TransformerModel,
    b: &Bound,
    layer: usize,
    x: &SplitHidden,
    opts: &Options,
) -> Result<SplitHidden> {
    let g = model.ffn(tape, b, layer, x.g)?;
    let u = unselected(tape, opts, |t| model.ffn(t, b, layer, x.u))?;
    Ok(SplitHidden { g, u, rows_g: x.rows_g.clone(), rows_u: x.rows_u.clone() })
}

/// Group-wise `norm(x)` and `x + y`, tracked for `G` only.
fn norm(
    tape: &mut Tape,
    b: &Bound,
    x: &SplitHidden,
    (scale, shift): (crate::autodiff::ParamId, crate::autodiff::ParamId),
    opts: &Options,
) -> Result<SplitHidden> {
    let g = tape.layer_norm(x.g, b.var(scale), b.var(shift))?;
    let u = unselected(tape, opts, |t| t.layer_norm(x.u, b.var(scale), b.var(shift)))?;
    Ok(SplitHidden { g, u, rows_g: x.rows_g.clone(), rows_u: x.rows_u.clone() })
}

fn residual(tape: &mut Tape, x: &SplitHidden, y: &SplitHidden, opts: &Options) -> Result<SplitHidden> {
    let g = tape.add(x.g, y.g)?;
    let u = unselected(tape, opts, |t| t.add(x.u, y.u))?;
    Ok(SplitHidden { g, u, rows_g: x.rows_g.clone(), rows_u: x.rows_u.clone() })
}

/// One pre-norm block on a split.
pub fn tokentune_layer(
    tape: &mut Tape,
    model: &TransformerModel,
    b: &Bound,
    layer: usize,
    h: &SplitHidden,
    seq: &TokenSequence,
    opts: &Options,
) -> Result<SplitHidden> {
    let p = model.layers[layer];
    tape.set_layer(Some(layer));
    let out = (|| {
        let n1 = norm(tape, b, h, (p.norm1_scale, p.norm1_shift), opts)?;
        let att = tokentune_attention(tape, model, b, layer, &n1, seq, opts)?;
        let h = residual(tape, h, &att, opts)?;
        let n2 = norm(tape, b, &h, (p.norm2_scale, p.norm2_shift), opts)?;
        let f = tokentune_ffn(tape, model, b, layer, &n2, opts)?;
        residual(tape, &h, &f, opts)
    })();
    tape.set_layer(None);
    out
}

/// Embeds, splits and runs every layer; returns the final split.
pub fn tokentune_forward(
    tape: &mut Tape,
    model: &TransformerModel,
    b: &Bound,
    seq: &TokenSequence,
    partition: &TokenPartition,
    opts: &Options,
) -> Result<SplitHidden> {
    if seq.is_empty() {
        return Err(Error::NoUnpaddedPositions);
    }
    let h = model.embed(tape, b, seq)?;
    let mut split = split_reorder(tape, h, partition)?;
    for l in 0..model.layers.len() {
        split = tokentune_layer(tape, model, b, l, &split, seq, opts)?;
    }
    Ok(split)
}

/// Classification loss with pooling over the selected rows only.
pub fn loss_classification(
    tape: &mut Tape,
    model: &TransformerModel,
    b: &Bound,
    split: &SplitHidden,
    label: usize,
) -> Result<Var> {
    check_label(label, model.config.n_classes)?;
    let logits = model.classify_pool_train(tape, b, split.g)?;
    tape.cross_entropy(logits, &[label], 1.0)
}

/// Next-token loss summed over the selected context rows.
pub fn loss_lm(
    tape: &mut Tape,
    model: &TransformerModel,
    b: &Bound,
    split: &SplitHidden,
    targets: &[Option<usize>],
) -> Result<Var> {
    if split.rows_g.is_empty() {
        return Err(Error::EmptySelection);
    }
    let t = split
        .rows_g
        .iter()
        .map(|&r| targets.get(r).copied().flatten().ok_or(Error::EmptySelection))
        .collect::<Result<Vec<usize>>>()?;
    let logits = model.lm_logits(tape, b, split.g)?;
    tape.cross_entropy(logits, &t, 1.0)
}

/// Forward plus the task loss for one example.
pub fn tokentune_loss(
    tape: &mut Tape,
    model: &TransformerModel,
    b: &Bound,
    seq: &TokenSequence,
    target: &Target,
    partition: &TokenPartition,
    opts: &Options,
) -> Result<Var> {
    let split = tokentune_forward(tape, model, b, seq, partition, opts)?;
    match target {
        Target::Class(label) => loss_classification(tape, model, b, &split, *label),
        Target::Next(targets) => loss_lm(tape, model, b, &split, targets),
    }
}

/// Task mode implied by a target.
pub fn mode_of(target: &Target) -> TaskMode {
    match target {
        Target::Class(_) => TaskMode::Classification,
        Target::Next(_) => TaskMode::Lm,
    }
}
