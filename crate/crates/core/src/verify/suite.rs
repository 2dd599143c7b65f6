//! Equivalence properties checked over a grid of small random models.

use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::adapters::{attach, LoraConfig};
use crate::autodiff::{OpKind, Tape};
use crate::error::{Error, Result};
use crate::matrix::Dtype;
use crate::parallel::{self, Execution};
use crate::tokentune::{
    partition_seed, restore_order, select_positions, selectable_rows, tokentune_forward,
    tokentune_loss, InjectedBug, KSpec, Options, TaskMode, TokenPartition,
};
use crate::transformer::{ModelConfig, Target, TokenSequence, TransformerModel};

use super::{full_grads, grad_store_rel_err, stopgrad_reference_backward, tokentune_grads};

pub const VALUE_TOLERANCE: f64 = 1e-12;
pub const GRAD_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Property {
    ValuePreservation,
    StopgradEquivalence,
    FullEquivalence,
    CacheScaling,
}

impl Property {
    pub const ALL: [Property; 4] = [
        Property::ValuePreservation,
        Property::StopgradEquivalence,
        Property::FullEquivalence,
        Property::CacheScaling,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Property::ValuePreservation => "value_preservation",
            Property::StopgradEquivalence => "stopgrad_equivalence",
            Property::FullEquivalence => "full_equivalence",
            Property::CacheScaling => "cache_scaling",
        }
    }
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One model/sequence/selection combination; fully reproducible from its fields.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct GridPoint {
    pub index: usize,
    pub seed: u64,
    pub n: usize,
    pub n_real: usize,
    pub k: usize,
    pub layers: usize,
    pub causal: bool,
    pub lora: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropertyResult {
    pub grid_point: GridPoint,
    pub property: Property,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteOptions {
    pub points: usize,
    pub seed: u64,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_n: usize,
    pub init_std: f64,
    pub bug: Option<InjectedBug>,
    pub execution: Execution,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            points: 64,
            seed: 0,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            max_n: 16,
            init_std: 0.4,
            bug: None,
            execution: Execution::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SuiteReport {
    pub results: Vec<PropertyResult>,
}

impl SuiteReport {
    pub fn pass(&self) -> bool {
        self.results.iter().all(|r| r.pass)
    }

    pub fn first_failure(&self) -> Option<&PropertyResult> {
        self.results.iter().find(|r| !r.pass)
    }

    /// Whether any check of `property` failed.
    pub fn failed(&self, property: Property) -> bool {
        self.results.iter().any(|r| r.property == property && !r.pass)
    }

    pub fn max_err(&self, property: Property) -> f64 {
        self.results
            .iter()
            .filter(|r| r.property == property)
            .map(|r| r.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for r in &self.results {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in Property::ALL {
            let n = self.results.iter().filter(|r| r.property == p).count();
            let bad = self.results.iter().filter(|r| r.property == p && !r.pass).count();
            writeln!(f, "{p:<22} {:>4}/{n} pass  max_err {:.3e}", n - bad, self.max_err(p))?;
        }
        match self.first_failure() {
            Some(r) => write!(
                f,
                "first failure: {} at grid point {} (seed {})",
                r.property, r.grid_point.index, r.grid_point.seed
            ),
            None => write!(f, "all properties hold"),
        }
    }
}

/// Grid points cycling through causal/bidirectional and with/without
/// adapters, with random length, padding, depth and selection size.
pub fn grid(opts: &SuiteOptions) -> Vec<GridPoint> {
    (0..opts.points)
        .map(|index| {
            let seed = partition_seed(opts.seed, 0, index as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let causal = index % 2 == 0;
            let lora = (index / 2) % 2 == 1;
            let n = rng.gen_range(4..=opts.max_n.max(4));
            let pad = rng.gen_range(0..=2.min(n - 3));
            let n_real = n - pad;
            let available = if causal { n_real - 1 } else { n_real };
            let k = rng.gen_range(1..=available);
            let layers = rng.gen_range(1..=3);
            GridPoint { index, seed, n, n_real, k, layers, causal, lora }
        })
        .collect()
}

struct Instance {
    model: TransformerModel,
    seq: TokenSequence,
    target: Target,
    mode: TaskMode,
}

fn instance(p: &GridPoint, opts: &SuiteOptions) -> Result<Instance> {
    let config = ModelConfig {
        vocab_size: 16,
        max_positions: opts.max_n.max(p.n),
        d_model: opts.d_model,
        n_heads: opts.n_heads,
        d_ff: opts.d_ff,
        n_layers: p.layers,
        causal: p.causal,
        n_classes: if p.causal { 0 } else { 3 },
        init_std: opts.init_std,
    };
    let mut model = TransformerModel::new(config, Dtype::F64, p.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ 0x5eed);
    if p.lora {
        let cfg = LoraConfig {
            targets: vec!["w_q".into(), "w_v".into(), "w1".into(), "w2".into()],
            rank: 2,
            alpha: 4.0,
        };
        attach(&mut model, &cfg, p.seed)?;
        let normal = Normal::new(0.0, opts.init_std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let bs: Vec<_> = model.adapters.iter().flat_map(|a| a.entries.iter().map(|e| e.b)).collect();
        for b in bs {
            for v in model.params.get_mut(b).value.data_mut() {
                *v = normal.sample(&mut rng);
            }
        }
    }
    let ids: Vec<usize> = (0..p.n_real).map(|_| rng.gen_range(1..16)).collect();
    let seq = TokenSequence::padded(ids, p.n);
    let (target, mode) = if p.causal {
        let t = (0..p.n)
            .map(|r| (r + 1 < p.n && seq.real[r + 1]).then(|| seq.ids[r + 1]))
            .collect();
        (Target::Next(t), TaskMode::Lm)
    } else {
        (Target::Class(rng.gen_range(0..3)), TaskMode::Classification)
    };
    Ok(Instance { model, seq, target, mode })
}

fn partition(inst: &Instance, k: KSpec, seed: u64) -> Result<TokenPartition> {
    select_positions(&inst.seq.real, k, inst.mode, seed)
}

fn layer_cache(inst: &Instance, part: &TokenPartition, opts: &Options) -> Result<(usize, usize)> {
    let mut tape = Tape::new(inst.model.dtype());
    let b = inst.model.bind(&mut tape);
    tokentune_loss(&mut tape, &inst.model, &b, &inst.seq, &inst.target, part, opts)?;
    let mut per_row = 0;
    let mut other = 0;
    for ((layer, kind), n) in tape.cache_breakdown() {
        if layer.is_none() {
            continue;
        }
        match kind {
            OpKind::LayerNorm | OpKind::Elementwise => per_row += n,
            _ => other += n,
        }
    }
    Ok((per_row, other))
}

fn deviation(actual: usize, expected: i64) -> f64 {
    (actual as f64 - expected as f64).abs() / (expected.unsigned_abs().max(1) as f64)
}

/// Largest deviation of restored token-selective hidden states from the
/// plain forward pass, relative to `max(|plain|, 1)`.
pub fn value_error(
    model: &TransformerModel,
    seq: &TokenSequence,
    part: &TokenPartition,
    opts: &Options,
) -> Result<f64> {
    let plain = {
        let mut tape = Tape::new(model.dtype());
        let b = model.bind(&mut tape);
        let h = tape.with_grad_disabled(|t| model.forward(t, &b, seq))?;
        tape.value(h).clone()
    };
    let restored = {
        let mut tape = Tape::new(model.dtype());
        let b = model.bind(&mut tape);
        let split = tokentune_forward(&mut tape, model, &b, seq, part, opts)?;
        let h = restore_order(&mut tape, &split)?;
        tape.value(h).clone()
    };
    Ok(restored
        .data()
        .iter()
        .zip(plain.data())
        .map(|(&a, &b)| (a - b).abs() / b.abs().max(1.0))
        .fold(0.0, f64::max))
}

/// Every property at one grid point.
pub fn check_point(p: &GridPoint, suite: &SuiteOptions) -> Result<Vec<PropertyResult>> {
    let inst = instance(p, suite)?;
    let opts = Options { bug: suite.bug };
    let part = partition(&inst, KSpec::Count(p.k), p.seed)?;
    let model = &inst.model;
    let result = |property, err: f64, tol: f64| PropertyResult {
        grid_point: p.clone(),
        property,
        max_rel_err: err,
        pass: err <= tol,
    };

    let value_err = value_error(model, &inst.seq, &part, &opts)?;

    let tt = tokentune_grads(model, &inst.seq, &inst.target, &part, &opts)?;
    let reference = stopgrad_reference_backward(model, &inst.seq, &inst.target, &part.selected)?;
    let stopgrad_err = grad_store_rel_err(model, &tt, &reference)?;

    let all = partition(&inst, KSpec::All, p.seed)?;
    let tt_all = tokentune_grads(model, &inst.seq, &inst.target, &all, &opts)?;
    let full = full_grads(model, &inst.seq, &inst.target)?;
    let full_err = grad_store_rel_err(model, &tt_all, &full)?;

    let available = selectable_rows(&inst.seq.real, inst.mode).len();
    let cache_err = if available < 2 {
        0.0
    } else {
        let at = |k| -> Result<(usize, usize)> {
            layer_cache(&inst, &partition(&inst, KSpec::Count(k), p.seed)?, &opts)
        };
        let (r1, o1) = at(1)?;
        let (_, o2) = at(2)?;
        let slope = o2 as i64 - o1 as i64;
        let mut worst: f64 = 0.0;
        for k in [2, p.k, available] {
            let (rk, ok) = at(k)?;
            worst = worst.max(deviation(rk, (k * r1) as i64));
            worst = worst.max(deviation(ok, o1 as i64 + (k as i64 - 1) * slope));
        }
        worst
    };

    Ok(vec![
        result(Property::ValuePreservation, value_err, VALUE_TOLERANCE),
        result(Property::StopgradEquivalence, stopgrad_err, GRAD_TOLERANCE),
        result(Property::FullEquivalence, full_err, GRAD_TOLERANCE),
        result(Property::CacheScaling, cache_err, 0.0),
    ])
}

/// Runs every property over the grid described by `opts`.
pub fn equivalence_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    if opts.points == 0 {
        return Err(Error::InvalidConfig("equivalence grid needs at least one point".into()));
    }
    if opts.max_n < 4 {
        return Err(Error::InvalidConfig("equivalence grid needs max_n >= 4".into()));
    }
    let points = grid(opts);
    let per_point = parallel::try_map(opts.execution, &points, |_, p| check_point(p, opts))?;
    Ok(SuiteReport { results: per_point.into_iter().flatten().collect() })
}
