//! AdamW with decoupled weight decay and a cosine learning-rate schedule.
//!
//! State is keyed by tensor name so parameter groups (adapter vs encoder)
//! can run at different learning rates while sharing one optimizer. Biases,
//! layer-norm gains, and layer-norm biases are excluded from weight decay,
//! following the usual convention.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Cosine decay from `base` to zero over `total_steps`; `step` counts from
/// zero. Steps at or past the end stay at zero.
pub fn cosine_lr(base: f64, step: u64, total_steps: u64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return 0.0;
    }
    let progress = step as f64 / total_steps as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

struct Moments {
    m: Array2<f64>,
    v: Array2<f64>,
}

pub struct AdamW {
    config: AdamWConfig,
    state: BTreeMap<String, Moments>,
    step: u64,
}

/// Tensors whose names mark them as biases or norm parameters skip weight
/// decay.
fn decays(name: &str) -> bool {
    let last = name.rsplit('.').next().unwrap_or(name);
    !matches!(last, "b" | "b1" | "b2" | "ln_gain" | "ln_bias")
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            state: BTreeMap::new(),
            step: 0,
        }
    }

    /// Advances the shared step counter; call once per optimization step,
    /// before applying any tensor.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one AdamW update to a named tensor at the given learning
    /// rate. Must be called after [`AdamW::begin_step`].
    pub fn apply(&mut self, name: &str, param: &mut Array2<f64>, grad: &Array2<f64>, lr: f64) {
        assert!(self.step > 0, "begin_step must run before apply");
        assert_eq!(
            param.raw_dim(),
            grad.raw_dim(),
            "parameter and gradient shapes differ for {name}"
        );
        let entry = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: Array2::zeros(param.raw_dim()),
            v: Array2::zeros(param.raw_dim()),
        });
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let bias1 = 1.0 - b1.powi(self.step as i32);
        let bias2 = 1.0 - b2.powi(self.step as i32);
        let wd = if decays(name) { self.config.weight_decay } else { 0.0 };
        for ((p, g), (m, v)) in param
            .iter_mut()
            .zip(grad.iter())
            .zip(entry.m.iter_mut().zip(entry.v.iter_mut()))
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p -= lr * (m_hat / (v_hat.sqrt() + self.config.eps) + wd * *p);
        }
    }
}
