//! Labeled image sets, the two-view augmentation pipeline and seeded epoch
//! iteration.
//!
//! Every augmentation draw is keyed by `(seed, stream, epoch, index)`, so a
//! batch is fully determined by those values no matter how batches are
//! produced or how many workers produce them.

mod augment;
mod synth;

pub use augment::{make_view_pair, AugmentParams, AugmentedPair};
pub use synth::{generate_shapes, SHAPE_CLASSES};

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::rng::{self, keyed_rng, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub split: Split,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
}

/// Per-channel normalization applied after augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: alloc::vec![0.0; channels],
            std: alloc::vec![1.0; channels],
        }
    }

    pub fn apply(&self, img: &mut [f64], hw: usize) {
        for (c, plane) in img.chunks_exact_mut(hw).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            plane.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
    }
}

/// Images stored as `C×H×W` planes with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    pub spec: DatasetSpec,
    pub pixels: Vec<f64>,
    pub labels: Vec<u32>,
}

impl ImageDataset {
    pub fn new(spec: DatasetSpec, pixels: Vec<f64>, labels: Vec<u32>) -> Result<Self> {
        let per = spec.channels * spec.height * spec.width;
        if per == 0 {
            return Err(Error::Data(format!(
                "dataset `{}` has zero-area images",
                spec.name
            )));
        }
        if pixels.len() != per * labels.len() {
            return Err(Error::Data(format!(
                "dataset `{}`: {} pixel values for {} images of {per} values",
                spec.name,
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= spec.num_classes) {
            return Err(Error::Data(format!(
                "dataset `{}`: label {bad} outside {} classes",
                spec.name, spec.num_classes
            )));
        }
        Ok(Self {
            spec,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.spec.channels * self.spec.height * self.spec.width
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.spec.channels, self.spec.height, self.spec.width]
    }

    /// Per-channel mean and standard deviation over all pixels.
    pub fn channel_stats(&self) -> Normalization {
        let [c, h, w] = self.image_shape();
        let hw = h * w;
        let mut mean = alloc::vec![0.0; c];
        let mut sq = alloc::vec![0.0; c];
        for i in 0..self.len() {
            for (ch, plane) in self.image(i).chunks_exact(hw).enumerate() {
                for v in plane {
                    mean[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let n = (self.len() * hw).max(1) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= n;
                libm::sqrt((s / n - *m * *m).max(0.0)).max(1e-6)
            })
            .collect();
        Normalization { mean, std }
    }

    /// Keeps the first `n` examples of each class, preserving order.
    pub fn per_class_subset(&self, n: usize) -> Self {
        let mut counts = alloc::vec![0usize; self.spec.num_classes];
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for i in 0..self.len() {
            let l = self.labels[i] as usize;
            if counts[l] < n {
                counts[l] += 1;
                pixels.extend_from_slice(self.image(i));
                labels.push(self.labels[i]);
            }
        }
        Self {
            spec: self.spec.clone(),
            pixels,
            labels,
        }
    }
}

/// A batch of examples. Training batches carry both augmented views; eval
/// batches carry a single un-augmented view in `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub v: Tensor,
    pub v_prime: Option<Tensor>,
    pub labels: Vec<u32>,
}

/// Seeded visiting order for one epoch: a permutation of `0..n`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut r = keyed_rng(seed, Stream::Shuffle, &[epoch]);
    rng::shuffle(&mut r, &mut idx);
    idx
}

pub fn num_batches(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Lazily produces the batches of one epoch.
pub struct EpochIter<'a> {
    data: &'a ImageDataset,
    params: AugmentParams,
    norm: &'a Normalization,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
    seed: u64,
    epoch: u64,
    stream: Stream,
    split: Split,
}

impl Iterator for EpochIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let indices = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        Some(self.build(indices))
    }
}

impl EpochIter<'_> {
    fn build(&self, indices: Vec<usize>) -> Result<Batch> {
        let [c, h, w] = self.data.image_shape();
        let shape = [indices.len(), c, h, w];
        let labels = indices.iter().map(|&i| self.data.labels[i]).collect();
        match self.split {
            Split::Eval => {
                let mut v = Vec::with_capacity(indices.len() * c * h * w);
                for &i in &indices {
                    let start = v.len();
                    v.extend_from_slice(self.data.image(i));
                    self.norm.apply(&mut v[start..], h * w);
                }
                Ok(Batch {
                    indices,
                    v: Tensor::from_vec(&shape, v),
                    v_prime: None,
                    labels,
                })
            }
            Split::Train => {
                let mut v = Vec::with_capacity(indices.len() * c * h * w);
                let mut vp = Vec::with_capacity(indices.len() * c * h * w);
                for &i in &indices {
                    let mut r = keyed_rng(self.seed, self.stream, &[self.epoch, i as u64]);
                    let pair = make_view_pair(
                        self.data.image(i),
                        [c, h, w],
                        self.data.labels[i],
                        &self.params,
                        self.norm,
                        &mut r,
                    )?;
                    v.extend_from_slice(&pair.v);
                    vp.extend_from_slice(&pair.v_prime);
                }
                Ok(Batch {
                    indices,
                    v: Tensor::from_vec(&shape, v),
                    v_prime: Some(Tensor::from_vec(&shape, vp)),
                    labels,
                })
            }
        }
    }
}

/// Batches for one epoch. Training splits are shuffled by `(seed, epoch)` and
/// augmented into view pairs; eval splits keep dataset order and yield one
/// deterministic view.
#[allow(clippy::too_many_arguments)]
pub fn iterate_epoch<'a>(
    data: &'a ImageDataset,
    split: Split,
    params: AugmentParams,
    norm: &'a Normalization,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    stream: Stream,
) -> Result<EpochIter<'a>> {
    if batch_size == 0 {
        return Err(Error::Data(String::from("batch size must be positive")));
    }
    let order = match split {
        Split::Train => epoch_order(data.len(), seed, epoch),
        Split::Eval => (0..data.len()).collect(),
    };
    Ok(EpochIter {
        data,
        params,
        norm,
        order,
        batch_size,
        cursor: 0,
        seed,
        epoch,
        stream,
        split,
    })
}

impl From<&DataConfig> for AugmentParams {
    fn from(d: &DataConfig) -> Self {
        Self {
            strength: d.aug_strength,
            crop_scale_min: d.crop_scale_min,
            flip_prob: d.flip_prob,
            jitter_prob: d.jitter_prob,
            brightness: d.brightness,
            contrast: d.contrast,
            saturation: d.saturation,
            grayscale_prob: d.grayscale_prob,
            blur_prob: d.blur_prob,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> ImageDataset {
        generate_shapes(n, 8, 3, 10, 7, Split::Train).unwrap()
    }

    #[test]
    fn epoch_covers_every_index_once() {
        let data = toy(100);
        let norm = data.channel_stats();
        let batches: Vec<Batch> = iterate_epoch(
            &data,
            Split::Train,
            AugmentParams::default(),
            &norm,
            32,
            1,
            0,
            Stream::StudentViews,
        )
        .unwrap()
        .collect::<Result<_>>()
        .unwrap();
        assert_eq!(batches.len(), 4);
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn order_depends_on_seed_and_epoch_only() {
        assert_eq!(epoch_order(50, 3, 1), epoch_order(50, 3, 1));
        assert_ne!(epoch_order(50, 3, 1), epoch_order(50, 3, 2));
        assert_ne!(epoch_order(50, 3, 1), epoch_order(50, 4, 1));
    }

    #[test]
    fn eval_split_is_unaugmented_single_view() {
        let data = toy(10);
        let norm = data.channel_stats();
        let b = iterate_epoch(&data, Split::Eval, AugmentParams::default(), &norm, 10, 0, 0, Stream::StudentViews)
            .unwrap()
            .next()
            .unwrap()
            .unwrap();
        assert!(b.v_prime.is_none());
        assert_eq!(b.indices, (0..10).collect::<Vec<_>>());
        let mut first = data.image(0).to_vec();
        norm.apply(&mut first, 64);
        assert_eq!(b.v.row(0), &first[..]);
    }

    #[test]
    fn views_change_across_epochs() {
        let data = toy(4);
        let norm = data.channel_stats();
        let pick = |epoch| {
            iterate_epoch(&data, Split::Train, AugmentParams::default(), &norm, 4, 5, epoch, Stream::StudentViews)
                .unwrap()
                .next()
                .unwrap()
                .unwrap()
        };
        let (a, b) = (pick(0), pick(1));
        let pos_a = a.indices.iter().position(|&i| i == 0).unwrap();
        let pos_b = b.indices.iter().position(|&i| i == 0).unwrap();
        assert_ne!(a.v.row(pos_a), b.v.row(pos_b));
    }

    #[test]
    fn mismatched_pixels_are_rejected() {
        let spec = DatasetSpec {
            name: "x".into(),
            split: Split::Train,
            channels: 1,
            height: 2,
            width: 2,
            num_classes: 2,
        };
        assert!(ImageDataset::new(spec.clone(), alloc::vec![0.0; 3], alloc::vec![0]).is_err());
        assert!(ImageDataset::new(spec, alloc::vec![0.0; 4], alloc::vec![2]).is_err());
    }
}
