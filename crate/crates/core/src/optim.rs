//! SGD with momentum and the warm-up + cosine learning-rate schedule.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Param;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    /// Rate reached at the end of warm-up.
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    /// Peak rate scaled linearly with batch size: `base_lr · batch / reference`.
    pub fn new(base_lr: f64, batch_size: usize, reference_batch: usize, warmup_steps: u64, total_steps: u64) -> Self {
        Self {
            peak_lr: base_lr * batch_size as f64 / reference_batch as f64,
            warmup_steps: warmup_steps.min(total_steps),
            total_steps: total_steps.max(1),
        }
    }
}

/// Linear warm-up from 0 at step 0 to the peak at `warmup_steps`, then
/// cosine decay to 0 at `total_steps`.
pub fn step_lr(s: &LrSchedule, k: u64) -> f64 {
    let k = k.min(s.total_steps);
    if k < s.warmup_steps {
        return s.peak_lr * k as f64 / s.warmup_steps as f64;
    }
    let span = (s.total_steps - s.warmup_steps).max(1) as f64;
    let progress = (k - s.warmup_steps) as f64 / span;
    s.peak_lr * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress))
}

/// `v ← μv + (g + λθ)`, `θ ← θ − lr·v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Param>, lr: f64) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| alloc::vec![0.0; p.len()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::Model(format!(
                "optimizer tracks {} tensors but got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        for (p, v) in params.into_iter().zip(&mut self.velocity) {
            if p.len() != v.len() {
                return Err(Error::Model("optimizer state shape mismatch".into()));
            }
            for ((x, g), vi) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + g + self.weight_decay * *x;
                *x -= lr * *vi;
            }
        }
        Ok(())
    }
}
