use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_core::RngCore;
use serde::{Deserialize, Serialize};

use super::Normalization;
use crate::error::{Error, Result};
use crate::rng::{uniform, uniform_range};

/// Magnitudes of the BYOL-style augmentation family. `strength` scales every
/// probability and magnitude; at 0 the pipeline is the identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub strength: f64,
    pub crop_scale_min: f64,
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            strength: 1.0,
            crop_scale_min: 0.35,
            flip_prob: 0.5,
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            grayscale_prob: 0.2,
            blur_prob: 0.0,
        }
    }
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            strength: 0.0,
            ..Self::default()
        }
    }
}

/// Two independently augmented, normalized views of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair {
    pub v: Vec<f64>,
    pub v_prime: Vec<f64>,
    /// Only the linear probe reads this.
    pub label: u32,
}

/// Draws `v` then `v′` from `rng`. The same generator state always yields the
/// same pair bit-for-bit.
pub fn make_view_pair<R: RngCore>(
    image: &[f64],
    shape: [usize; 3],
    label: u32,
    params: &AugmentParams,
    norm: &Normalization,
    rng: &mut R,
) -> Result<AugmentedPair> {
    let [c, h, w] = shape;
    if c * h * w == 0 || image.len() != c * h * w {
        return Err(Error::Data(String::from(
            "cannot augment a zero-area or mis-shaped image",
        )));
    }
    let mut v = augment(image, shape, params, rng);
    let mut v_prime = augment(image, shape, params, rng);
    norm.apply(&mut v, h * w);
    norm.apply(&mut v_prime, h * w);
    Ok(AugmentedPair { v, v_prime, label })
}

/// One augmentation draw. The number of random values consumed does not
/// depend on the outcome of any draw.
fn augment<R: RngCore>(image: &[f64], shape: [usize; 3], p: &AugmentParams, rng: &mut R) -> Vec<f64> {
    let [c, h, w] = shape;
    let s = p.strength;

    let min_scale = 1.0 - s * (1.0 - p.crop_scale_min);
    let area = uniform_range(rng, min_scale, 1.0);
    let log_ratio = s * uniform_range(rng, libm::log(3.0 / 4.0), libm::log(4.0 / 3.0));
    let ratio = libm::exp(log_ratio);
    let cw = (libm::sqrt(area * ratio) * w as f64).clamp(1.0, w as f64);
    let ch = (libm::sqrt(area / ratio) * h as f64).clamp(1.0, h as f64);
    let x0 = uniform(rng) * (w as f64 - cw);
    let y0 = uniform(rng) * (h as f64 - ch);
    let flip = uniform(rng) < p.flip_prob * s;

    let jitter = uniform(rng) < p.jitter_prob * s;
    let bf = 1.0 + s * p.brightness * uniform_range(rng, -1.0, 1.0);
    let cf = 1.0 + s * p.contrast * uniform_range(rng, -1.0, 1.0);
    let sf = 1.0 + s * p.saturation * uniform_range(rng, -1.0, 1.0);
    let gray = uniform(rng) < p.grayscale_prob * s;
    let blur = uniform(rng) < p.blur_prob * s;
    let sigma = uniform_range(rng, 0.1, 1.0);

    let mut out = if cw == w as f64 && ch == h as f64 {
        image.to_vec()
    } else {
        resized_crop(image, shape, x0, y0, cw, ch)
    };
    if flip {
        for row in out.chunks_exact_mut(w) {
            row.reverse();
        }
    }
    if c == 3 {
        if jitter {
            color_jitter(&mut out, h * w, bf, cf, sf);
        }
        if gray {
            to_grayscale(&mut out, h * w);
        }
    } else if jitter {
        for v in out.iter_mut() {
            *v = (*v * bf).clamp(0.0, 1.0);
        }
    }
    if blur {
        gaussian_blur(&mut out, shape, sigma);
    }
    out
}

/// Bilinear resampling of the crop `[x0, x0+cw) × [y0, y0+ch)` back to `h×w`.
fn resized_crop(image: &[f64], [c, h, w]: [usize; 3], x0: f64, y0: f64, cw: f64, ch: f64) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    let sx = cw / w as f64;
    let sy = ch / h as f64;
    for oy in 0..h {
        let fy = (y0 + (oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let iy = fy as usize;
        let iy1 = (iy + 1).min(h - 1);
        let ty = fy - iy as f64;
        for ox in 0..w {
            let fx = (x0 + (ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let ix = fx as usize;
            let ix1 = (ix + 1).min(w - 1);
            let tx = fx - ix as f64;
            for ci in 0..c {
                let p = &image[ci * h * w..(ci + 1) * h * w];
                let top = p[iy * w + ix] * (1.0 - tx) + p[iy * w + ix1] * tx;
                let bot = p[iy1 * w + ix] * (1.0 - tx) + p[iy1 * w + ix1] * tx;
                out[ci * h * w + oy * w + ox] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

fn luma(img: &[f64], hw: usize, i: usize) -> f64 {
    0.299 * img[i] + 0.587 * img[hw + i] + 0.114 * img[2 * hw + i]
}

fn color_jitter(img: &mut [f64], hw: usize, brightness: f64, contrast: f64, saturation: f64) {
    img.iter_mut().for_each(|v| *v = (*v * brightness).clamp(0.0, 1.0));
    let mean_gray = (0..hw).map(|i| luma(img, hw, i)).sum::<f64>() / hw as f64;
    img.iter_mut()
        .for_each(|v| *v = (mean_gray + (*v - mean_gray) * contrast).clamp(0.0, 1.0));
    for i in 0..hw {
        let g = luma(img, hw, i);
        for ch in 0..3 {
            let v = &mut img[ch * hw + i];
            *v = (g + (*v - g) * saturation).clamp(0.0, 1.0);
        }
    }
}

fn to_grayscale(img: &mut [f64], hw: usize) {
    for i in 0..hw {
        let g = luma(img, hw, i);
        for ch in 0..3 {
            img[ch * hw + i] = g;
        }
    }
}

/// Separable 3-tap Gaussian with clamped borders.
fn gaussian_blur(img: &mut [f64], [c, h, w]: [usize; 3], sigma: f64) {
    let e = libm::exp(-1.0 / (2.0 * sigma * sigma));
    let k = [e / (1.0 + 2.0 * e), 1.0 / (1.0 + 2.0 * e), e / (1.0 + 2.0 * e)];
    let mut tmp = vec![0.0; h * w];
    for ci in 0..c {
        let plane = &mut img[ci * h * w..(ci + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let l = plane[y * w + x.saturating_sub(1)];
                let r = plane[y * w + (x + 1).min(w - 1)];
                tmp[y * w + x] = k[0] * l + k[1] * plane[y * w + x] + k[2] * r;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let u = tmp[y.saturating_sub(1) * w + x];
                let d = tmp[(y + 1).min(h - 1) * w + x];
                plane[y * w + x] = k[0] * u + k[1] * tmp[y * w + x] + k[2] * d;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{keyed_rng, Stream};

    fn image() -> Vec<f64> {
        (0..3 * 6 * 6).map(|i| (i % 17) as f64 / 17.0).collect()
    }

    #[test]
    fn same_seed_same_pair() {
        let img = image();
        let norm = Normalization::identity(3);
        let p = AugmentParams::default();
        let a = make_view_pair(&img, [3, 6, 6], 1, &p, &norm, &mut keyed_rng(9, Stream::StudentViews, &[0])).unwrap();
        let b = make_view_pair(&img, [3, 6, 6], 1, &p, &norm, &mut keyed_rng(9, Stream::StudentViews, &[0])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let img = image();
        let norm = Normalization::identity(3);
        let p = AugmentParams::default();
        let a = make_view_pair(&img, [3, 6, 6], 1, &p, &norm, &mut keyed_rng(1, Stream::StudentViews, &[0])).unwrap();
        let b = make_view_pair(&img, [3, 6, 6], 1, &p, &norm, &mut keyed_rng(2, Stream::StudentViews, &[0])).unwrap();
        assert_ne!(a.v, b.v);
        assert_ne!(a.v, a.v_prime);
    }

    #[test]
    fn zero_strength_is_identity_then_normalize() {
        let img = image();
        let norm = Normalization {
            mean: vec![0.5, 0.4, 0.3],
            std: vec![0.2, 0.25, 0.3],
        };
        let pair = make_view_pair(
            &img,
            [3, 6, 6],
            0,
            &AugmentParams::identity(),
            &norm,
            &mut keyed_rng(4, Stream::StudentViews, &[]),
        )
        .unwrap();
        let mut want = img.clone();
        norm.apply(&mut want, 36);
        assert_eq!(pair.v, want);
        assert_eq!(pair.v_prime, want);
    }

    #[test]
    fn zero_area_is_rejected() {
        let norm = Normalization::identity(1);
        let r = make_view_pair(&[], [1, 0, 4], 0, &AugmentParams::default(), &norm, &mut keyed_rng(0, Stream::StudentViews, &[]));
        assert!(matches!(r, Err(Error::Data(_))));
    }
}
