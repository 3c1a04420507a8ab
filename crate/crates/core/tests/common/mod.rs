#![allow(dead_code)]

use rand_chacha::ChaCha8Rng;
use simdis_core::config::{Scheme, SchemeConfig};
use simdis_core::models::{BranchOutput, ViewBundle, ViewPair};
use simdis_core::rng::{keyed_rng, normal, Stream};
use simdis_core::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    keyed_rng(seed, Stream::Synth, &[0xfeed])
}

pub fn randn(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| normal(r)).collect())
}

pub fn rand_pair(r: &mut ChaCha8Rng, b: usize, d: usize) -> ViewPair<BranchOutput> {
    let mut out = || BranchOutput {
        y: randn(r, &[b, d]),
        z: randn(r, &[b, d]),
    };
    ViewPair { v: out(), vp: out() }
}

/// Random student-shaped bundle: both heads present.
pub fn student_bundle(r: &mut ChaCha8Rng, b: usize, d: usize) -> ViewBundle {
    ViewBundle {
        online: rand_pair(r, b, d),
        target: rand_pair(r, b, d),
        byol_pred: Some(ViewPair { v: randn(r, &[b, d]), vp: randn(r, &[b, d]) }),
        distill_pred: Some(ViewPair { v: randn(r, &[b, d]), vp: randn(r, &[b, d]) }),
    }
}

/// Random teacher-shaped bundle: projections only.
pub fn teacher_bundle(r: &mut ChaCha8Rng, b: usize, d: usize) -> ViewBundle {
    ViewBundle {
        online: rand_pair(r, b, d),
        target: rand_pair(r, b, d),
        byol_pred: None,
        distill_pred: None,
    }
}

/// Tiny models for fast whole-network checks.
pub fn tiny_config(scheme: Scheme) -> SchemeConfig {
    let mut c = SchemeConfig {
        scheme,
        ..SchemeConfig::default()
    };
    c.data.image_size = 8;
    c.model.teacher_encoder = "mini-resnet-4".into();
    c.model.student_encoder = "mini-resnet-2".into();
    c.model.proj_hidden = 8;
    c.model.proj_dim = 6;
    c.model.pred_hidden = 8;
    c
}

/// Relative distance between two gradient vectors with an absolute floor
/// for entries that are exactly zero analytically.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / na.max(nb).max(1e-300)
}

/// Central difference of `f` in every coordinate of `x`.
pub fn central_diff(x: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(x);
            x[i] = orig - h;
            let down = f(x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}
