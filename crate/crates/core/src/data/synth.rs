//! Procedural labeled image corpus used at desk scale. The class is the shape
//! (or texture) category; colors, position, size, rotation, background
//! gradient and pixel noise are nuisance factors, roughly the factors a
//! BYOL-style augmentation family teaches invariance to.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::{PI, TAU};

use rand_core::RngCore;

use super::{DatasetSpec, ImageDataset, Split};
use crate::error::{Error, Result};
use crate::rng::{self, keyed_rng, normal, uniform, uniform_range, Stream};

pub const SHAPE_CLASSES: [&str; 10] = [
    "disk",
    "ring",
    "square",
    "triangle",
    "plus",
    "hollow_square",
    "twin_disks",
    "bar",
    "stripes",
    "checker",
];

/// Coverage test in shape-local coordinates (unit radius, already rotated).
fn inside(class: usize, u: f64, v: f64, texture: f64) -> bool {
    let r2 = u * u + v * v;
    match class {
        0 => r2 <= 1.0,
        1 => (0.36..=1.0).contains(&r2),
        2 => u.abs().max(v.abs()) <= 0.8,
        3 => {
            // Equilateral triangle with circumradius 1.
            let h = 0.5;
            v >= -h && (libm::sqrt(3.0) * u + v) <= 1.0 && (-libm::sqrt(3.0) * u + v) <= 1.0
        }
        4 => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        5 => {
            let m = u.abs().max(v.abs());
            (0.5..=0.85).contains(&m)
        }
        6 => {
            let a = (u - 0.55) * (u - 0.55) + v * v;
            let b = (u + 0.55) * (u + 0.55) + v * v;
            a <= 0.16 || b <= 0.16
        }
        7 => u.abs() <= 1.0 && v.abs() <= 0.22,
        8 => libm::sin(texture * u) > 0.0,
        9 => (libm::sin(texture * u) > 0.0) ^ (libm::sin(texture * v) > 0.0),
        _ => false,
    }
}

fn random_color<R: RngCore>(rng: &mut R) -> [f64; 3] {
    [uniform(rng), uniform(rng), uniform(rng)]
}

fn render<R: RngCore>(class: usize, size: usize, channels: usize, rng: &mut R, out: &mut Vec<f64>) {
    let bg = random_color(rng).map(|c| 0.3 * c);
    let fg = random_color(rng).map(|c| 0.7 + 0.3 * c);
    let grad_angle = uniform_range(rng, 0.0, TAU);
    let grad_amp = uniform_range(rng, 0.0, 0.25);
    let textured = class >= 8;
    let scale = if textured {
        1.0
    } else {
        uniform_range(rng, 0.3, 0.48) * size as f64
    };
    let margin = if textured { 0.0 } else { 0.5 * size as f64 - scale };
    let cx = 0.5 * size as f64 + uniform_range(rng, -1.0, 1.0) * margin.max(0.0) * 0.7;
    let cy = 0.5 * size as f64 + uniform_range(rng, -1.0, 1.0) * margin.max(0.0) * 0.7;
    let theta = uniform_range(rng, 0.0, PI);
    let texture = uniform_range(rng, 0.9, 1.6);
    let noise = uniform_range(rng, 0.0, 0.06);
    let (sin_t, cos_t) = (libm::sin(theta), libm::cos(theta));

    const SS: usize = 3;
    let start = out.len();
    out.resize(start + channels * size * size, 0.0);
    for py in 0..size {
        for px in 0..size {
            let mut hits = 0usize;
            for sy in 0..SS {
                for sx in 0..SS {
                    let x = px as f64 + (sx as f64 + 0.5) / SS as f64 - cx;
                    let y = py as f64 + (sy as f64 + 0.5) / SS as f64 - cy;
                    let u = (cos_t * x + sin_t * y) / scale;
                    let v = (-sin_t * x + cos_t * y) / scale;
                    if inside(class, u, v, texture) {
                        hits += 1;
                    }
                }
            }
            let alpha = hits as f64 / (SS * SS) as f64;
            let gx = (px as f64 / size as f64 - 0.5) * libm::cos(grad_angle)
                + (py as f64 / size as f64 - 0.5) * libm::sin(grad_angle);
            for ch in 0..channels {
                let (b, f) = if channels == 3 {
                    (bg[ch], fg[ch])
                } else {
                    (bg.iter().sum::<f64>() / 3.0, fg.iter().sum::<f64>() / 3.0)
                };
                let base = b + grad_amp * gx;
                let v = base * (1.0 - alpha) + f * alpha + noise * normal(rng);
                out[start + ch * size * size + py * size + px] = v.clamp(0.0, 1.0);
            }
        }
    }
}

/// `n` images with classes assigned round-robin then shuffled. The eval split
/// draws from a disjoint generator stream.
pub fn generate_shapes(
    n: usize,
    size: usize,
    channels: usize,
    num_classes: usize,
    seed: u64,
    split: Split,
) -> Result<ImageDataset> {
    if num_classes < 2 || num_classes > SHAPE_CLASSES.len() {
        return Err(Error::Data(format!(
            "shape corpus supports 2..={} classes, got {num_classes}",
            SHAPE_CLASSES.len()
        )));
    }
    if size < 4 || channels == 0 {
        return Err(Error::Data(format!(
            "shape corpus needs image_size >= 4 and channels >= 1 (got {size}, {channels})"
        )));
    }
    let split_tag = match split {
        Split::Train => 0,
        Split::Eval => 1,
    };
    let mut labels: Vec<u32> = (0..n).map(|i| (i % num_classes) as u32).collect();
    rng::shuffle(&mut keyed_rng(seed, Stream::Synth, &[split_tag, u64::MAX]), &mut labels);
    let mut pixels = Vec::with_capacity(n * channels * size * size);
    for (i, &label) in labels.iter().enumerate() {
        let mut r = keyed_rng(seed, Stream::Synth, &[split_tag, i as u64]);
        render(label as usize, size, channels, &mut r, &mut pixels);
    }
    let spec = DatasetSpec {
        name: String::from("shapes"),
        split,
        channels,
        height: size,
        width: size,
        num_classes,
    };
    ImageDataset::new(spec, pixels, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let a = generate_shapes(40, 8, 3, 10, 1, Split::Train).unwrap();
        let b = generate_shapes(40, 8, 3, 10, 1, Split::Train).unwrap();
        assert_eq!(a, b);
        for c in 0..10 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 4);
        }
        assert!(a.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn splits_differ() {
        let a = generate_shapes(10, 8, 3, 5, 1, Split::Train).unwrap();
        let b = generate_shapes(10, 8, 3, 5, 1, Split::Eval).unwrap();
        assert_ne!(a.pixels, b.pixels);
    }

    #[test]
    fn class_count_is_bounded() {
        assert!(generate_shapes(10, 8, 3, 11, 1, Split::Train).is_err());
        assert!(generate_shapes(10, 8, 3, 1, 1, Split::Train).is_err());
    }
}
