//! Fine-tuning loop: full, token-selective, adapter and combined regimes.
//!
//! Per-example gradients are computed independently (in parallel when
//! enabled) and summed in example order, so results do not depend on the
//! execution mode. Summed gradients are divided by the number of examples
//! (classification) or predicted tokens (LM) before the optimizer step.

mod adam;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{attach, LoraConfig};
use crate::autodiff::{GradStore, OpKind, Tape};
use crate::error::{Error, Result};
use crate::matrix::Dtype;
use crate::parallel::{self, Execution};
use crate::tokentune::{
    mode_of, partition_seed, select_positions, tokentune_loss, InjectedBug, KSpec, Options,
};
use crate::transformer::{log_softmax, Target, TokenSequence, TransformerModel};

pub use adam::{Adam, AdamConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    #[default]
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "tokentune")]
    TokenTune,
    #[serde(rename = "lora")]
    Lora,
    #[serde(rename = "tokentune+lora")]
    TokenTuneLora,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::Full, Regime::TokenTune, Regime::Lora, Regime::TokenTuneLora];

    pub fn selective(self) -> bool {
        matches!(self, Regime::TokenTune | Regime::TokenTuneLora)
    }

    pub fn lora(self) -> bool {
        matches!(self, Regime::Lora | Regime::TokenTuneLora)
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::Full => "full",
            Regime::TokenTune => "tokentune",
            Regime::Lora => "lora",
            Regime::TokenTuneLora => "tokentune+lora",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown regime `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub regime: Regime,
    /// Selected positions per example (selective regimes).
    pub k: Option<usize>,
    /// Selected fraction of selectable positions (selective regimes).
    pub k_ratio: Option<f64>,
    pub lora: LoraConfig,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub dtype: Dtype,
    pub execution: Execution,
    pub log_wall_time: bool,
    pub inject_bug: Option<InjectedBug>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Full,
            k: None,
            k_ratio: None,
            lora: LoraConfig::default(),
            batch_size: 8,
            grad_accum: 1,
            epochs: 1,
            max_steps: None,
            lr: 1e-3,
            weight_decay: 0.0,
            seed: 0,
            dtype: Dtype::F32,
            execution: Execution::default(),
            log_wall_time: false,
            inject_bug: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 || self.grad_accum == 0 {
            return bad("batch_size and grad_accum must be >= 1".into());
        }
        if self.regime.selective() {
            self.kspec()?.validate()?;
        } else if self.k.is_some() || self.k_ratio.is_some() {
            return bad(format!("k is only meaningful for selective regimes, not `{}`", self.regime));
        }
        if self.regime.lora() {
            self.lora.validate()?;
        }
        self.adam().validate()
    }

    /// Selection size; exactly one of `k` and `k_ratio` must be set.
    pub fn kspec(&self) -> Result<KSpec> {
        match (self.k, self.k_ratio) {
            (Some(k), None) => Ok(KSpec::Count(k)),
            (None, Some(r)) => Ok(KSpec::Ratio(r)),
            (None, None) => Err(Error::InvalidConfig(format!(
                "regime `{}` needs k or k_ratio",
                self.regime
            ))),
            (Some(_), Some(_)) => Err(Error::InvalidConfig("set only one of k and k_ratio".into())),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub seq: TokenSequence,
    pub target: Target,
}

impl Example {
    /// Next-token example: row `r` predicts the token in row `r + 1`.
    pub fn lm(seq: TokenSequence) -> Self {
        let n = seq.len();
        let target = (0..n)
            .map(|r| (r + 1 < n && seq.real[r] && seq.real[r + 1]).then(|| seq.ids[r + 1]))
            .collect();
        Self { seq, target: Target::Next(target) }
    }

    pub fn classification(seq: TokenSequence, label: usize) -> Self {
        Self { seq, target: Target::Class(label) }
    }
}

/// Gradient and bookkeeping for one example.
#[derive(Clone, Debug)]
pub struct ExampleOutcome {
    pub grads: GradStore,
    pub loss: f64,
    /// Loss terms: 1 for classification, predicted tokens for LM.
    pub count: usize,
    pub selected: usize,
    pub cached_elements: usize,
    pub peak_elements: usize,
    /// Cached elements per (layer, op kind), taken before backward.
    pub breakdown: BTreeMap<(Option<usize>, OpKind), usize>,
    /// Cache still held once backward has finished.
    pub residual_elements: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub examples: usize,
    pub loss_terms: usize,
    pub selected_tokens: usize,
    pub grad_norm: f64,
    /// Activation cache summed over the step's examples.
    pub cached_elements: usize,
    /// Parameters, gradients, optimizer state and the summed per-example
    /// activation peaks, in bytes.
    pub peak_bytes: usize,
    pub wall_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub examples: usize,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub perplexity: Option<f64>,
}

pub struct Trainer {
    pub model: TransformerModel,
    pub config: TrainConfig,
    pub optimizer: Adam,
    step: usize,
}

impl Trainer {
    /// Attaches adapters when the regime asks for them and converts the
    /// model to the configured precision.
    pub fn new(model: TransformerModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut model = model.to_dtype(config.dtype);
        if config.regime.lora() && model.adapters.is_none() {
            attach(&mut model, &config.lora, config.seed)?;
        }
        let optimizer = Adam::new(config.adam(), &model)?;
        Ok(Self { model, config, optimizer, step: 0 })
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// Bytes of parameters, gradients and optimizer state.
    pub fn static_bytes(&self) -> usize {
        let trainable = self.model.params.elements(true);
        let elements = self.model.params.elements(false) + trainable + self.optimizer.state_elements();
        elements * self.model.dtype().width()
    }

    fn options(&self) -> Options {
        Options { bug: self.config.inject_bug }
    }

    /// Loss and summed gradient of one example; `index` identifies the
    /// example within its dataset for partition sampling.
    pub fn example_grads(&self, ex: &Example, index: usize, epoch: usize) -> Result<ExampleOutcome> {
        let model = &self.model;
        let mut tape = Tape::new(model.dtype());
        let b = model.bind(&mut tape);
        let (loss, count, selected) = if self.config.regime.selective() {
            let seed = partition_seed(self.config.seed, epoch as u64, index as u64);
            let part = select_positions(&ex.seq.real, self.config.kspec()?, mode_of(&ex.target), seed)?;
            let loss =
                tokentune_loss(&mut tape, model, &b, &ex.seq, &ex.target, &part, &self.options())?;
            let count = match ex.target {
                Target::Class(_) => 1,
                Target::Next(_) => part.k,
            };
            (loss, count, part.k)
        } else {
            let loss = model.plain_loss(&mut tape, &b, &ex.seq, &ex.target)?;
            let count = match &ex.target {
                Target::Class(_) => 1,
                Target::Next(t) => t.iter().flatten().count(),
            };
            (loss, count, ex.seq.unpadded())
        };
        let value = tape.value(loss).get(0, 0);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { example: index });
        }
        let cached_elements = tape.cached_activation_elements();
        let breakdown = tape.cache_breakdown();
        let grads = tape.backward(loss)?;
        Ok(ExampleOutcome {
            grads,
            loss: value,
            count,
            selected,
            cached_elements,
            peak_elements: tape.peak_elements(),
            breakdown,
            residual_elements: tape.live_cache_elements(),
        })
    }

    /// One optimizer step over `batch`, given as `(dataset index, example)`
    /// pairs and processed in micro-batches of `batch_size`.
    pub fn train_step(&mut self, batch: &[(usize, &Example)], epoch: usize) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let start = self.config.log_wall_time.then(Instant::now);
        let mut total = GradStore::new();
        let (mut loss, mut count, mut selected, mut cached, mut peak) = (0.0, 0, 0, 0, 0);
        for micro in batch.chunks(self.config.batch_size) {
            let outcomes = parallel::try_map(self.config.execution, micro, |_, &(i, ex)| {
                self.example_grads(ex, i, epoch)
            })?;
            for o in outcomes {
                total.merge(o.grads);
                loss += o.loss;
                count += o.count;
                selected += o.selected;
                cached += o.cached_elements;
                peak += o.peak_elements;
            }
        }
        total.scale(1.0 / count.max(1) as f64);
        let grad_norm = total.norm();
        self.optimizer.step(&mut self.model, &total)?;
        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            epoch,
            loss: loss / count.max(1) as f64,
            examples: batch.len(),
            loss_terms: count,
            selected_tokens: selected,
            grad_norm,
            cached_elements: cached,
            peak_bytes: self.static_bytes() + peak * self.model.dtype().width(),
            wall_ms: start.map(|s| s.elapsed().as_secs_f64() * 1e3),
        })
    }

    /// Trains for the configured epochs (or `max_steps`), shuffling each
    /// epoch, and writes one JSON line per step to `log`.
    pub fn fit(&mut self, data: &[Example], mut log: impl Write) -> Result<Vec<StepMetrics>> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let per_step = self.config.batch_size * self.config.grad_accum;
        let mut history = Vec::new();
        for epoch in 0..self.config.epochs {
            let mut order: Vec<usize> = (0..data.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(partition_seed(self.config.seed ^ 0xda7a, epoch as u64, 0));
            order.shuffle(&mut rng);
            for chunk in order.chunks(per_step) {
                if self.config.max_steps.is_some_and(|m| self.step >= m) {
                    return Ok(history);
                }
                let batch: Vec<(usize, &Example)> = chunk.iter().map(|&i| (i, &data[i])).collect();
                let m = self.train_step(&batch, epoch)?;
                serde_json::to_writer(&mut log, &m)?;
                log.write_all(b"\n")?;
                history.push(m);
            }
        }
        Ok(history)
    }
}

/// Loss of every example under plain evaluation: pooled-over-real-rows
/// accuracy for classification, per-token perplexity for LM.
pub fn evaluate(model: &TransformerModel, data: &[Example], exec: Execution) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per = parallel::try_map(exec, data, |_, ex| -> Result<(f64, usize, bool)> {
        let mut tape = Tape::new(model.dtype());
        let b = model.bind(&mut tape);
        tape.with_grad_disabled(|t| {
            let h = model.forward(t, &b, &ex.seq)?;
            match &ex.target {
                Target::Class(label) => {
                    let logits = model.classify_pool_eval(t, &b, h, &ex.seq.real)?;
                    let lp = log_softmax(t.value(logits));
                    crate::transformer::check_label(*label, model.config.n_classes)?;
                    let row = lp.row(0);
                    let best = (0..row.len()).fold(0, |a, j| if row[j] > row[a] { j } else { a });
                    Ok((-row[*label], 1, best == *label))
                }
                Target::Next(targets) => {
                    let rows: Vec<usize> = (0..targets.len()).filter(|&r| targets[r].is_some()).collect();
                    if rows.is_empty() {
                        return Ok((0.0, 0, false));
                    }
                    let hs = t.select_rows(h, &rows)?;
                    let logits = model.lm_logits(t, &b, hs)?;
                    let lp = log_softmax(t.value(logits));
                    let nll = rows
                        .iter()
                        .enumerate()
                        .map(|(i, &r)| -lp.get(i, targets[r].expect("filtered")))
                        .sum();
                    Ok((nll, rows.len(), false))
                }
            }
        })
    })?;
    let terms: usize = per.iter().map(|p| p.1).sum();
    if terms == 0 {
        return Err(Error::EmptyDataset);
    }
    let loss = per.iter().map(|p| p.0).sum::<f64>() / terms as f64;
    let classification = matches!(data[0].target, Target::Class(_));
    Ok(EvalMetrics {
        examples: data.len(),
        loss,
        accuracy: classification
            .then(|| per.iter().filter(|p| p.2).count() as f64 / data.len() as f64),
        perplexity: (!classification).then(|| loss.exp()),
    })
}

#[cfg(test)]
mod tests;
