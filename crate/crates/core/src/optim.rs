//! AdamW with decoupled weight decay, and the warmup + cosine schedule.

use ecvit_tensor::{Element, Tensor};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = || -> Vec<Tensor<T>> {
            store
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.value.shape().to_vec()))
                .collect()
        };
        AdamW {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update at learning rate `lr`. Parameters flagged as exempt skip
    /// the decay term.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        let params = store.params_mut();
        if grads.len() != params.len() {
            let missing = params.get(grads.len()).map_or("?", |p| p.name.as_str());
            return Err(Error::MissingGradient(missing.to_string()));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(Error::Contract(format!(
                    "gradient for `{}` has shape {:?}, parameter {:?}",
                    p.name,
                    g.shape(),
                    p.value.shape()
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let decay = if p.decay { lr * c.weight_decay } else { 0.0 };
            let pv = p.value.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pv.len() {
                let gi = g.data()[i].as_f64();
                let mi = c.beta1 * md[i].as_f64() + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * vd[i].as_f64() + (1.0 - c.beta2) * gi * gi;
                md[i] = T::from_f64_lossy(mi);
                vd[i] = T::from_f64_lossy(vi);
                let x = pv[i].as_f64();
                let x = x - decay * x;
                let upd = (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
                pv[i] = T::from_f64_lossy(x - lr * upd);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr` over `warmup` steps, then half-cosine to zero
/// at `total`.
pub fn cosine_lr(step: u64, total: u64, base_lr: f64, warmup: u64) -> f64 {
    if step < warmup {
        return base_lr * (step + 1) as f64 / warmup as f64;
    }
    if total <= warmup || step >= total {
        return if step >= total { 0.0 } else { base_lr };
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Default warmup length: 5% of all steps.
pub fn default_warmup(total: u64) -> u64 {
    total / 20
}

/// Rescales gradients to global L2 norm at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_grad_norm<T: Element>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::from_f64_lossy(max_norm / norm);
        for g in grads {
            for v in g.data_mut() {
                *v = *v * s;
            }
        }
    }
    norm
}
