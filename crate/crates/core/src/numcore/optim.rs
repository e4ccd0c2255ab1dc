use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// SGD hyper-parameters. The rate warms up linearly from zero to
/// `learning_rate` over `warmup_iters` steps, then follows a cosine decay to
/// `final_rate` at the last step of the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub final_rate: f64,
    pub warmup_iters: usize,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            final_rate: 0.0001,
            warmup_iters: 150,
            momentum: 0.9,
            batch_size: 8,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        // a zero rate is allowed: it freezes training but still runs the loop
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be finite and >= 0"));
        }
        if !(self.final_rate >= 0.0 && self.final_rate.is_finite()) {
            return Err(Error::invalid("final_rate must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        Ok(())
    }

    /// Rate for the 1-based `step` of a run lasting `total_steps`.
    pub fn rate_at(&self, step: usize, total_steps: usize) -> f64 {
        if self.learning_rate == 0.0 {
            return 0.0;
        }
        if step <= self.warmup_iters {
            return self.learning_rate * step as f64 / self.warmup_iters.max(1) as f64;
        }
        let decay_len = total_steps.saturating_sub(self.warmup_iters);
        if decay_len == 0 {
            return self.final_rate;
        }
        let progress = ((step - self.warmup_iters) as f64 / decay_len as f64).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.final_rate + (self.learning_rate - self.final_rate) * cosine
    }
}

/// Momentum SGD (`v <- m v + g; theta <- theta - lr v`). Tensors whose
/// `trainable` flag is off are skipped entirely, velocity included, so a
/// frozen set stays bitwise unchanged.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(
        &mut self,
        params: Vec<&mut Tensor>,
        grads: &[Vec<f64>],
        trainable: &[bool],
        lr: f64,
        momentum: f64,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != trainable.len() {
            return Err(Error::invalid(format!(
                "{} tensors, {} gradients, {} trainable flags",
                params.len(),
                grads.len(),
                trainable.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|t| vec![0.0; t.len()]).collect();
        }
        for (k, tensor) in params.into_iter().enumerate() {
            if !trainable[k] {
                continue;
            }
            let vel = &mut self.velocity[k];
            for ((theta, v), g) in tensor.data_mut().iter_mut().zip(vel.iter_mut()).zip(&grads[k]) {
                *v = momentum * *v + g;
                *theta -= lr * *v;
            }
        }
        Ok(())
    }
}
