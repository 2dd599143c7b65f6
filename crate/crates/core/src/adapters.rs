//! Low-rank adapters on frozen weight matrices.
//!
//! An adapted weight computes `x W + s (x A) B` with `s = alpha / r`. `A`
//! starts at normal(0, 0.02) and `B` at zero, so attaching does not change
//! the model's outputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamId;
use crate::error::{Error, Result};
use crate::matrix::{gemm, Matrix};
use crate::transformer::TransformerModel;

pub const LORA_INIT_STD: f64 = 0.02;

/// Per-layer weights an adapter may target.
pub const TARGETS: [&str; 4] = ["w_q", "w_v", "w1", "w2"];

fn default_targets() -> Vec<String> {
    vec!["w1".into(), "w2".into()]
}

fn default_rank() -> usize {
    8
}

fn default_alpha() -> f64 {
    16.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    #[serde(default = "default_targets")]
    pub targets: Vec<String>,
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            targets: default_targets(),
            rank: default_rank(),
            alpha: default_alpha(),
        }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::InvalidConfig("lora rank must be >= 1".into()));
        }
        if !self.alpha.is_finite() {
            return Err(Error::InvalidConfig("lora alpha must be finite".into()));
        }
        for t in &self.targets {
            if !TARGETS.contains(&t.as_str()) {
                return Err(Error::UnknownTarget(t.clone()));
            }
        }
        Ok(())
    }
}

/// One adapted weight: `base` is frozen, `a` is `d_in x r`, `b` is `r x d_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub base: ParamId,
    pub a: ParamId,
    pub b: ParamId,
    pub scaling: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet {
    pub config: LoraConfig,
    pub entries: Vec<LoraAdapter>,
    pub merged: bool,
}

impl AdapterSet {
    /// The adapter acting on `base`, unless already folded in.
    pub fn active(&self, base: ParamId) -> Option<&LoraAdapter> {
        if self.merged {
            return None;
        }
        self.entries.iter().find(|e| e.base == base)
    }
}

fn target_param(model: &TransformerModel, layer: usize, target: &str) -> Result<ParamId> {
    let p = &model.layers[layer];
    Ok(match target {
        "w_q" => p.w_q,
        "w_v" => p.w_v,
        "w1" => p.w1,
        "w2" => p.w2,
        other => return Err(Error::UnknownTarget(other.to_string())),
    })
}

/// Adds adapters on every configured target of every layer and freezes all
/// other parameters. Fails if adapters are already attached.
pub fn attach(model: &mut TransformerModel, config: &LoraConfig, seed: u64) -> Result<()> {
    config.validate()?;
    if model.adapters.is_some() {
        return Err(Error::InvalidConfig("adapters already attached".into()));
    }
    let dtype = model.dtype();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, LORA_INIT_STD).expect("positive std");
    for id in (0..model.params.len()).map(ParamId) {
        model.params.get_mut(id).frozen = true;
    }
    let mut entries = Vec::new();
    for layer in 0..model.layers.len() {
        for target in &config.targets {
            let base = target_param(model, layer, target)?;
            let (d_in, d_out) = model.params.value(base).shape();
            let name = model.params.get(base).name.clone();
            let a_data = (0..d_in * config.rank).map(|_| normal.sample(&mut rng)).collect();
            let a = Matrix::from_vec(d_in, config.rank, a_data, dtype)?;
            let b = Matrix::zeros(config.rank, d_out, dtype);
            entries.push(LoraAdapter {
                base,
                a: model.params.push(format!("{name}.lora_a"), a, false),
                b: model.params.push(format!("{name}.lora_b"), b, false),
                scaling: config.scaling(),
            });
        }
    }
    model.adapters = Some(AdapterSet {
        config: config.clone(),
        entries,
        merged: false,
    });
    Ok(())
}

/// Folds `s A B` into each base weight. The adapter factors stay in the
/// parameter store but no longer take part in the forward pass.
pub fn merge(model: &mut TransformerModel) -> Result<()> {
    let set = model
        .adapters
        .as_mut()
        .ok_or_else(|| Error::InvalidConfig("no adapters attached".into()))?;
    if set.merged {
        return Err(Error::AlreadyMerged);
    }
    set.merged = true;
    let entries = set.entries.clone();
    for e in entries {
        let b = model.params.value(e.b);
        // zero factors leave the base bitwise untouched
        if b.data().iter().all(|&x| x == 0.0) {
            continue;
        }
        let delta = gemm(model.params.value(e.a), false, b, false, e.scaling)?;
        model.params.get_mut(e.base).value.add_assign(&delta);
    }
    Ok(())
}

/// Names of the adapter factor tensors, in parameter order.
pub fn adapter_params(model: &TransformerModel) -> Vec<ParamId> {
    model
        .adapters
        .iter()
        .flat_map(|s| s.entries.iter().flat_map(|e| [e.a, e.b]))
        .collect()
}
