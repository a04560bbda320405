//! AdamW with linear warmup.

use crate::error::{Result, TensorError};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Cosine decay to zero over this many steps; `None` keeps `lr` flat.
    pub decay_steps: Option<usize>,
    /// Clip the global gradient norm to this value before the update.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 0,
            decay_steps: None,
            max_grad_norm: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: usize,
}

impl AdamW {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        let c = &self.config;
        let s = self.step as f64;
        let warm = if c.warmup_steps > 0 {
            ((s + 1.0) / c.warmup_steps as f64).min(1.0)
        } else {
            1.0
        };
        let decay = match c.decay_steps {
            Some(total) if total > 0 => {
                let frac = (s / total as f64).min(1.0);
                0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
            _ => 1.0,
        };
        c.lr * warm * decay
    }

    /// Applies one update; `grads` must align with the store's order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(TensorError::Checkpoint(format!(
                "optimizer got {} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second = self.first.clone();
        }
        let mut clip = 1.0;
        if let Some(max_norm) = self.config.max_grad_norm {
            let norm = grads.iter().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(TensorError::NonFinite {
                    context: "gradient norm".into(),
                });
            }
            if norm > max_norm {
                clip = max_norm / norm;
            }
        }
        let lr = self.current_lr();
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            let p = store.get_mut(i).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j] * clip;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                p[j] -= lr * (update + c.weight_decay * p[j]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Tape, Tensor};

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::from_slice(&[3.0, -2.0]));
        let mut opt = AdamW::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        for _ in 0..500 {
            let tape = Tape::new();
            let p = store.bind(&tape, true);
            let x = p.get(id);
            let loss = x.mul(x).unwrap().sum();
            let grads = p.gradients(&loss.backward().unwrap());
            opt.step(&mut store, &grads).unwrap();
        }
        assert!(store.get(id).max_abs() < 1e-2);
    }
}
