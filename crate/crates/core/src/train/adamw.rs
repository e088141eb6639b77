use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; off by default.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

/// First/second moments per parameter plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamW<T: Real = f32> {
    pub config: AdamWConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// `θ ← θ − lr·(m̂/(√v̂ + eps) + wd·θ)` for every trainable entry.
    /// Gradients are validated before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for e in store.entries().iter().filter(|e| e.trainable) {
            if !e.grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter `{}`", e.name)));
            }
        }
        let c = self.config;
        let scale = match c.clip_norm {
            Some(max) => {
                let norm = store
                    .entries()
                    .iter()
                    .filter(|e| e.trainable)
                    .flat_map(|e| e.grad.data())
                    .map(|g| g.to_f64_lossless().powi(2))
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for ((e, m), v) in store.entries_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !e.trainable {
                continue;
            }
            let params = e.value.data_mut().iter_mut();
            for (((p, g), mi), vi) in params.zip(e.grad.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let g = g.to_f64_lossless() * scale;
                let mf = c.beta1 * mi.to_f64_lossless() + (1.0 - c.beta1) * g;
                let vf = c.beta2 * vi.to_f64_lossless() + (1.0 - c.beta2) * g * g;
                *mi = T::from_f64_lossy(mf);
                *vi = T::from_f64_lossy(vf);
                let theta = p.to_f64_lossless();
                let update = (mf / bc1) / ((vf / bc2).sqrt() + c.eps) + c.weight_decay * theta;
                *p = T::from_f64_lossy(theta - c.lr * update);
            }
        }
        Ok(())
    }
}
