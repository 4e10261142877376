use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::params::{round_f32, ParamId, ParamStore};

/// Warmup followed by inverse-square-root decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
}

impl LrSchedule {
    /// Learning rate for a 1-based step.
    pub fn at(&self, step: u64) -> f64 {
        let step = step.max(1) as f64;
        let warm = self.warmup_steps.max(1) as f64;
        self.peak * (step / warm).min((warm / step).sqrt())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: 1.0,
        }
    }
}

/// Adam moments, one pair per parameter (zero-sized for buffers).
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Matrix>,
    pub second: Vec<Matrix>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = |id: ParamId| {
            let (r, c) = store.value(id).shape();
            Matrix::zeros(r, c)
        };
        Self {
            config,
            step: 0,
            first: store.ids().map(zeros).collect(),
            second: store.ids().map(zeros).collect(),
        }
    }

    /// Applies one update and returns the pre-clip gradient norm. Parameters
    /// and moments are rounded to f32 afterwards.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Matrix)], lr: f64) -> f64 {
        self.step += 1;
        let norm = grads
            .iter()
            .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clip = if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            self.config.clip_norm / norm
        } else {
            1.0
        };
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (id, g) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            let m = self.first[id.index()].data_mut();
            let v = self.second[id.index()].data_mut();
            let p = store.value_mut(*id).data_mut();
            for (((pv, mv), vv), &gv) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                let gv = gv * clip;
                *mv = round_f32(beta1 * *mv + (1.0 - beta1) * gv);
                *vv = round_f32(beta2 * *vv + (1.0 - beta2) * gv * gv);
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv = round_f32(*pv - lr * mhat / (vhat.sqrt() + eps));
            }
        }
        norm
    }
}
