//! AdamW with decoupled weight decay, and a reduce-on-plateau schedule.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone)]
pub struct AdamW {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(n_params: usize, weight_decay: f64) -> Self {
        AdamW {
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// One update. Parameters with `trainable[i] == false` are left
    /// untouched, including by weight decay.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], trainable: &[bool], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), trainable.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            if !trainable[i] {
                continue;
            }
            let g = grads[i];
            params[i] -= lr * self.weight_decay * params[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Divides the learning rate by `factor` once the monitored loss has failed
/// to strictly improve on its best value for `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    best: Option<f64>,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        PlateauScheduler {
            lr,
            factor,
            patience,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Records one epoch's loss; returns true when the rate was reduced.
    pub fn step(&mut self, loss: f64) -> bool {
        match self.best {
            Some(best) if !(loss < best) => self.bad_epochs += 1,
            _ => {
                self.best = Some(loss);
                self.bad_epochs = 0;
            }
        }
        if self.bad_epochs >= self.patience {
            self.lr /= self.factor;
            self.bad_epochs = 0;
            true
        } else {
            false
        }
    }
}
