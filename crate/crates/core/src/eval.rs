//! Frozen-feature probes: a linear softmax classifier and a cosine kNN vote.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::ProbeConfig;
use crate::data::{iterate_epoch, AugmentParams, ImageDataset, Normalization, Split};
use crate::error::{Error, Result};
use crate::nn::{Encoder, Mode};
use crate::rng::{self, keyed_rng, Stream};
use crate::tensor::{dot, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Percentages in `[0, 100]`.
    pub top1: f64,
    pub top5: f64,
}

/// Encoder outputs `y` for every image, in dataset order, with BN in eval
/// mode. The encoder itself is never touched.
pub fn extract_features(encoder: &Encoder, data: &ImageDataset, norm: &Normalization, batch_size: usize) -> Result<Tensor> {
    if data.spec.channels != encoder.spec.in_channels {
        return Err(Error::Eval(format!(
            "encoder takes {} channels but the dataset has {}",
            encoder.spec.in_channels, data.spec.channels
        )));
    }
    let mut enc = encoder.clone();
    let d = enc.output_dim();
    let mut out = Vec::with_capacity(data.len() * d);
    for batch in iterate_epoch(data, Split::Eval, AugmentParams::identity(), norm, batch_size.max(1), 0, 0, Stream::Probe)? {
        out.extend_from_slice(enc.forward(&batch?.v, Mode::Eval).data());
    }
    Ok(Tensor::from_vec(&[data.len(), d], out))
}

/// Per-dimension mean and standard deviation of `x`'s rows.
fn moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows(), x.row_len());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        mean.iter_mut().zip(x.row(i)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.iter().map(|s| libm::sqrt(s / n.max(1) as f64 + 1e-8)).collect();
    (mean, std)
}

fn standardize(x: &Tensor, mean: &[f64], std: &[f64]) -> Tensor {
    let mut out = x.clone();
    for i in 0..out.rows() {
        for ((v, m), s) in out.row_mut(i).iter_mut().zip(mean).zip(std) {
            *v = (*v - m) / s;
        }
    }
    out
}

fn check_labels(feats: &Tensor, labels: &[u32], num_classes: usize, what: &str) -> Result<()> {
    if feats.rows() != labels.len() {
        return Err(Error::Eval(format!(
            "{what}: {} feature rows but {} labels",
            feats.rows(),
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= num_classes) {
        return Err(Error::Eval(format!(
            "{what}: label {l} is outside the probe's {num_classes} classes"
        )));
    }
    Ok(())
}

/// Top-1 and top-5 accuracy (in percent) of `scores` rows against `labels`.
pub fn topk_accuracy(scores: &Tensor, labels: &[u32]) -> ProbeResult {
    let n = labels.len().max(1) as f64;
    let (mut top1, mut top5) = (0usize, 0usize);
    for (i, &l) in labels.iter().enumerate() {
        let row = scores.row(i);
        let own = row[l as usize];
        // Rank = classes scoring strictly higher, ties resolved towards lower indices.
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &s)| s > own || (s == own && j < l as usize))
            .count();
        top1 += usize::from(rank < 1);
        top5 += usize::from(rank < 5);
    }
    ProbeResult {
        top1: 100.0 * top1 as f64 / n,
        top5: 100.0 * top5 as f64 / n,
    }
}

/// Softmax regression on standardized features trained with momentum SGD.
/// Weights start at zero and batches are shuffled by `(seed, epoch)`, so the
/// result is a pure function of its inputs.
#[allow(clippy::too_many_arguments)]
pub fn linear_probe_features(
    train: &Tensor,
    train_labels: &[u32],
    test: &Tensor,
    test_labels: &[u32],
    num_classes: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    if num_classes < 2 {
        return Err(Error::Eval("the probe needs at least two classes".into()));
    }
    check_labels(train, train_labels, num_classes, "probe train split")?;
    check_labels(test, test_labels, num_classes, "probe eval split")?;
    if train.rows() == 0 || test.rows() == 0 {
        return Err(Error::Eval("the probe needs non-empty train and eval splits".into()));
    }
    if train.row_len() != test.row_len() {
        return Err(Error::Eval(format!(
            "train features have {} dims but eval features {}",
            train.row_len(),
            test.row_len()
        )));
    }
    let (mean, std) = moments(train);
    let xtr = standardize(train, &mean, &std);
    let xte = standardize(test, &mean, &std);
    let d = xtr.row_len();
    let k = num_classes;
    let mut w = vec![0.0; k * d];
    let mut b = vec![0.0; k];
    let mut vw = vec![0.0; k * d];
    let mut vb = vec![0.0; k];
    let bs = cfg.batch_size.max(1);
    let mut logits = vec![0.0; k];
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..xtr.rows()).collect();
        rng::shuffle(&mut keyed_rng(seed, Stream::Probe, &[epoch as u64]), &mut order);
        for chunk in order.chunks(bs) {
            let mut gw = vec![0.0; k * d];
            let mut gb = vec![0.0; k];
            for &i in chunk {
                let x = xtr.row(i);
                for c in 0..k {
                    logits[c] = b[c] + dot(&w[c * d..(c + 1) * d], x);
                }
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| libm::exp(l - m)).sum();
                for c in 0..k {
                    let p = libm::exp(logits[c] - m) / z;
                    let g = (p - f64::from(u8::from(c == train_labels[i] as usize))) / chunk.len() as f64;
                    gb[c] += g;
                    gw[c * d..(c + 1) * d].iter_mut().zip(x).for_each(|(gi, xi)| *gi += g * xi);
                }
            }
            for ((wi, vi), gi) in w.iter_mut().zip(&mut vw).zip(&gw) {
                *vi = cfg.momentum * *vi + gi;
                *wi -= cfg.lr * *vi;
            }
            for ((bi, vi), gi) in b.iter_mut().zip(&mut vb).zip(&gb) {
                *vi = cfg.momentum * *vi + gi;
                *bi -= cfg.lr * *vi;
            }
        }
    }
    let mut scores = Tensor::zeros(&[xte.rows(), k]);
    for i in 0..xte.rows() {
        let x = xte.row(i);
        for (c, s) in scores.row_mut(i).iter_mut().enumerate() {
            *s = b[c] + dot(&w[c * d..(c + 1) * d], x);
        }
    }
    Ok(topk_accuracy(&scores, test_labels))
}

/// Linear probe on a frozen encoder's representation `y`.
pub fn linear_probe(
    encoder: &Encoder,
    train: &ImageDataset,
    test: &ImageDataset,
    norm: &Normalization,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    if train.spec.num_classes != test.spec.num_classes {
        return Err(Error::Eval(format!(
            "train split has {} classes but eval split {}",
            train.spec.num_classes, test.spec.num_classes
        )));
    }
    let ftr = extract_features(encoder, train, norm, cfg.batch_size)?;
    let fte = extract_features(encoder, test, norm, cfg.batch_size)?;
    linear_probe_features(&ftr, &train.labels, &fte, &test.labels, train.spec.num_classes, cfg, seed)
}

fn unit_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let r = out.row_mut(i);
        let n = libm::sqrt(dot(r, r) + 1e-12);
        r.iter_mut().for_each(|v| *v /= n);
    }
    out
}

/// Cosine-similarity kNN with a majority vote over the `k` nearest gallery
/// items (ties go to the class whose members are more similar in total, then
/// to the lower class index). Returns top-1 accuracy in percent.
pub fn knn_probe(
    gallery: &Tensor,
    gallery_labels: &[u32],
    query: &Tensor,
    query_labels: &[u32],
    num_classes: usize,
    k: usize,
) -> Result<f64> {
    check_labels(gallery, gallery_labels, num_classes, "kNN gallery")?;
    check_labels(query, query_labels, num_classes, "kNN queries")?;
    if k == 0 || k >= gallery.rows() {
        return Err(Error::Eval(format!(
            "k = {k} must be positive and smaller than the gallery ({} items)",
            gallery.rows()
        )));
    }
    if gallery.row_len() != query.row_len() {
        return Err(Error::Eval("gallery and query feature widths differ".into()));
    }
    let g = unit_rows(gallery);
    let q = unit_rows(query);
    let mut correct = 0usize;
    let mut sims: Vec<(f64, usize)> = Vec::with_capacity(g.rows());
    for i in 0..q.rows() {
        sims.clear();
        sims.extend((0..g.rows()).map(|j| (dot(q.row(i), g.row(j)), j)));
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![(0usize, 0.0f64); num_classes];
        for &(s, j) in &sims[..k] {
            let v = &mut votes[gallery_labels[j] as usize];
            v.0 += 1;
            v.1 += s;
        }
        let mut best = 0;
        for c in 1..num_classes {
            let (bc, bs) = votes[best];
            let (cc, cs) = votes[c];
            if cc > bc || (cc == bc && cs > bs) {
                best = c;
            }
        }
        correct += usize::from(best == query_labels[i] as usize);
    }
    Ok(100.0 * correct as f64 / query_labels.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n: usize, seed: u64) -> (Tensor, Vec<u32>) {
        let mut r = keyed_rng(seed, Stream::Probe, &[99]);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = (i % 3) as u32;
            for j in 0..4 {
                let centre = if j == c as usize { 3.0 } else { 0.0 };
                x.push(centre + 0.3 * rng::normal(&mut r));
            }
            y.push(c);
        }
        (Tensor::from_vec(&[n, 4], x), y)
    }

    #[test]
    fn separable_blobs_are_learned() {
        let (a, la) = blobs(60, 1);
        let (b, lb) = blobs(30, 2);
        let cfg = ProbeConfig {
            epochs: 30,
            lr: 0.05,
            ..ProbeConfig::default()
        };
        let r = linear_probe_features(&a, &la, &b, &lb, 3, &cfg, 0).unwrap();
        assert_eq!(r.top1, 100.0);
        assert_eq!(r.top5, 100.0);
        assert_eq!(knn_probe(&a, &la, &b, &lb, 3, 5).unwrap(), 100.0);
    }

    #[test]
    fn knn_rejects_large_k() {
        let (a, la) = blobs(6, 1);
        assert!(matches!(knn_probe(&a, &la, &a, &la, 3, 6), Err(Error::Eval(_))));
        assert!(knn_probe(&a, &la, &a, &la, 3, 5).is_ok());
    }

    #[test]
    fn topk_handles_ties_and_ranks() {
        let s = Tensor::from_vec(&[2, 6], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let r = topk_accuracy(&s, &[0, 0]);
        assert_eq!(r.top1, 50.0);
        assert_eq!(r.top5, 50.0);
    }
}
