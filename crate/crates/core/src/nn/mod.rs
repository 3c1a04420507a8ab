//! Minimal layer library with hand-written backward passes.
//!
//! Every layer offers three entry points:
//! - `forward(x, mode)` for passes that never need gradients,
//! - `forward_taped(x)` for training passes, returning a tape,
//! - `backward(tape, grad_out)` which accumulates parameter gradients into
//!   [`Param::grad`] and returns the gradient with respect to the input.
//!
//! Gradient stopping is structural: a branch that is only ever run through
//! `forward` has no tape, so nothing can be backpropagated into it.

mod blocks;
mod layers;

pub use blocks::{Encoder, EncoderSpec, EncoderTape, Mlp, MlpSpec, MlpTape, ResBlock, StageSpec};
pub use layers::{BatchNorm, Conv2d, GlobalAvgPool, Linear, Relu};

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// How batch-norm layers behave during a pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running statistics updated.
    Train,
    /// Running statistics, no state changes.
    Eval,
}

/// A trainable tensor with its gradient accumulator. Only `value` is
/// serialized; gradients are transient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<f64>", into = "Vec<f64>")]
pub struct Param {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(value: Vec<f64>) -> Self {
        let grad = vec![0.0; value.len()];
        Self { value, grad }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

impl From<Vec<f64>> for Param {
    fn from(value: Vec<f64>) -> Self {
        Param::new(value)
    }
}

impl From<Param> for Vec<f64> {
    fn from(p: Param) -> Self {
        p.value
    }
}

/// Uniform access to parameters and non-trainable state of a module.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    /// Non-trainable state (batch-norm running statistics).
    fn buffers(&self) -> Vec<&[f64]> {
        Vec::new()
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

/// FNV-1a over the bit patterns of all parameters and buffers. Any change to
/// any value (including sign of zero) changes the digest with overwhelming
/// probability.
pub fn digest<M: Module + ?Sized>(module: &M) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0100_0000_01b3;
    let mut h = OFFSET;
    let mut feed = |xs: &[f64]| {
        for x in xs {
            for b in x.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(PRIME);
            }
        }
        h ^= 0xff;
        h = h.wrapping_mul(PRIME);
    };
    for p in module.params() {
        feed(&p.value);
    }
    for b in module.buffers() {
        feed(b);
    }
    h
}

/// One layer in an analytic cost description of a network.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        out_h: usize,
        out_w: usize,
    },
    Linear {
        d_in: usize,
        d_out: usize,
    },
    BatchNorm {
        features: usize,
    },
    Relu {
        features: usize,
    },
    GlobalAvgPool {
        channels: usize,
        h: usize,
        w: usize,
    },
    Add {
        features: usize,
    },
    /// Any layer type the cost model does not know how to count.
    Other(&'static str),
}
