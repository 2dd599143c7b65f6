use serde::{Deserialize, Serialize};

use crate::autodiff::GradStore;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::transformer::TransformerModel;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Decoupled weight decay.
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay.is_finite()
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("bad optimizer settings {self:?}")))
        }
    }
}

/// Adam with moment buffers for trainable parameters only.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    moments: Vec<Option<(Matrix, Matrix)>>,
}

impl Adam {
    pub fn new(config: AdamConfig, model: &TransformerModel) -> Result<Self> {
        config.validate()?;
        let moments = model
            .params
            .iter()
            .map(|(_, p)| {
                (!p.frozen).then(|| {
                    let z = Matrix::zeros(p.value.rows(), p.value.cols(), p.value.dtype());
                    (z.clone(), z)
                })
            })
            .collect();
        Ok(Self { config, t: 0, moments })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Elements held in moment buffers.
    pub fn state_elements(&self) -> usize {
        self.moments.iter().flatten().map(|(m, v)| m.len() + v.len()).sum()
    }

    /// Applies one update. Trainable parameters absent from `grads` take a
    /// zero gradient. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, model: &mut TransformerModel, grads: &GradStore) -> Result<()> {
        for (id, g) in grads.iter() {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient { param: model.params.get(id).name.clone() });
            }
        }
        if self.moments.len() != model.params.len() {
            return Err(Error::InvalidConfig("optimizer built for a different model".into()));
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps, weight_decay } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (i, slot) in self.moments.iter_mut().enumerate() {
            let Some((m, v)) = slot else { continue };
            let id = crate::autodiff::ParamId(i);
            let grad = grads.get(id);
            let param = &mut model.params.get_mut(id).value;
            let (md, vd, pd) = (m.data_mut(), v.data_mut(), param.data_mut());
            for j in 0..pd.len() {
                let g = grad.map_or(0.0, |g| g.data()[j]);
                md[j] = beta1 * md[j] + (1.0 - beta1) * g;
                vd[j] = beta2 * vd[j] + (1.0 - beta2) * g * g;
                let update = (md[j] / c1) / ((vd[j] / c2).sqrt() + eps);
                pd[j] -= lr * (update + weight_decay * pd[j]);
            }
            m.round_in_place();
            v.round_in_place();
            param.round_in_place();
        }
        Ok(())
    }
}
