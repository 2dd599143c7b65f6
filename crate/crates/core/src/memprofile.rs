//! Engine-accounted memory of a training step.
//!
//! Bytes are element counts from the tape ledger and the parameter store
//! times the dtype width. Examples of a batch are accounted on separate
//! tapes and summed, as if they were resident together.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::parallel;
use crate::train::{Example, Regime, TrainConfig, Trainer};
use crate::transformer::{ModelConfig, TokenSequence, TransformerModel};

pub const CSV_HEADER: &str =
    "regime,n,k,batch,params_bytes,grads_bytes,optimizer_bytes,activations_bytes,peak_bytes";

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BreakdownEntry {
    pub layer: Option<usize>,
    pub op: String,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MemoryReport {
    pub regime: Regime,
    pub n: usize,
    /// Selected positions per example (every selectable row for non-selective regimes).
    pub k: usize,
    pub batch: usize,
    pub params_bytes: usize,
    pub grads_bytes: usize,
    pub optimizer_bytes: usize,
    pub activations_bytes: usize,
    pub peak_bytes: usize,
    /// Activation bytes still cached after backward.
    pub residual_bytes: usize,
    pub breakdown: Vec<BreakdownEntry>,
}

impl MemoryReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.regime,
            self.n,
            self.k,
            self.batch,
            self.params_bytes,
            self.grads_bytes,
            self.optimizer_bytes,
            self.activations_bytes,
            self.peak_bytes
        )
    }
}

/// Runs one training step of `config` over `batch` and accounts its memory.
pub fn profile_step(model: &TransformerModel, batch: &[Example], config: &TrainConfig) -> Result<MemoryReport> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let cfg = TrainConfig { batch_size: batch.len(), grad_accum: 1, ..config.clone() };
    let mut trainer = Trainer::new(model.clone(), cfg)?;
    let outcomes = parallel::try_map(config.execution, batch, |i, ex| trainer.example_grads(ex, i, 0))?;
    let width = trainer.model.dtype().width();
    let mut breakdown = std::collections::BTreeMap::new();
    for o in &outcomes {
        for (key, n) in &o.breakdown {
            *breakdown.entry(*key).or_insert(0) += n * width;
        }
    }
    let params_bytes = trainer.model.params.elements(false) * width;
    let grads_bytes = trainer.model.params.elements(true) * width;
    let optimizer_bytes = trainer.optimizer.state_elements() * width;
    let activations = outcomes.iter().map(|o| o.cached_elements).sum::<usize>();
    let peak = outcomes.iter().map(|o| o.peak_elements).sum::<usize>();
    let residual = outcomes.iter().map(|o| o.residual_elements).sum::<usize>();
    let k = outcomes[0].selected;
    let pairs: Vec<_> = batch.iter().enumerate().collect();
    trainer.train_step(&pairs, 0)?;
    Ok(MemoryReport {
        regime: config.regime,
        n: batch[0].seq.len(),
        k,
        batch: batch.len(),
        params_bytes,
        grads_bytes,
        optimizer_bytes,
        activations_bytes: activations * width,
        peak_bytes: trainer.static_bytes() + peak * width,
        residual_bytes: residual * width,
        breakdown: breakdown
            .into_iter()
            .map(|((layer, op), bytes)| BreakdownEntry { layer, op: format!("{op:?}"), bytes })
            .collect(),
    })
}

/// Deterministic examples of length `n` for accounting; contents do not
/// affect memory.
pub fn synthetic_batch(config: &ModelConfig, n: usize, batch: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch)
        .map(|_| {
            let ids: Vec<usize> = (0..n).map(|_| rng.gen_range(1..config.vocab_size.max(2))).collect();
            let seq = TokenSequence::new(ids);
            if config.causal {
                Example::lm(seq)
            } else {
                Example::classification(seq, rng.gen_range(0..config.n_classes.max(1)))
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepGrid {
    pub regimes: Vec<Regime>,
    pub ns: Vec<usize>,
    /// Selection ratios for the selective regimes.
    pub ratios: Vec<f64>,
    pub batches: Vec<usize>,
}

/// One report per grid point: non-selective regimes once per (n, batch),
/// selective ones once per ratio as well.
pub fn sweep_report(
    model: &ModelConfig,
    base: &TrainConfig,
    grid: &SweepGrid,
) -> Result<Vec<MemoryReport>> {
    let mut out = Vec::new();
    for &n in &grid.ns {
        if n == 0 || n > model.max_positions {
            return Err(Error::InvalidConfig(format!(
                "sweep length {n} outside 1..={}",
                model.max_positions
            )));
        }
        let m = TransformerModel::new(model.clone(), base.dtype, base.seed)?;
        for &batch in &grid.batches {
            let examples = synthetic_batch(model, n, batch, base.seed);
            for &regime in &grid.regimes {
                let ratios: Vec<Option<f64>> = if regime.selective() {
                    grid.ratios.iter().copied().map(Some).collect()
                } else {
                    vec![None]
                };
                for ratio in ratios {
                    let cfg = TrainConfig { regime, k: None, k_ratio: ratio, ..base.clone() };
                    out.push(profile_step(&m, &examples, &cfg)?);
                }
            }
        }
    }
    Ok(out)
}

pub fn write_csv(reports: &[MemoryReport], mut w: impl Write) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in reports {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}
