//! Normalized-MSE objective, the symmetric BYOL term and the (multi-view)
//! distillation term.
//!
//! Every function here takes projections as constants: gradients are only
//! ever returned with respect to predictions, and callers push those through
//! the online branch that produced them.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::{ViewTarget, ViewTargetSet};
use crate::error::{Error, Result};
use crate::models::{HeadGrads, ViewBundle, ViewPair};
use crate::tensor::{dot, Tensor};

/// Added to squared norms before the square root.
pub const NORM_EPS: f64 = 1e-12;

/// `‖p/‖p‖ − z/‖z‖‖²`, i.e. `2 − 2·cos(p, z)`, in `[0, 4]`.
pub fn normalized_mse(p: &[f64], z: &[f64]) -> Result<f64> {
    Ok(normalized_mse_grad(p, z)?.0)
}

/// Value and gradient with respect to `p`; `z` is a constant.
pub fn normalized_mse_grad(p: &[f64], z: &[f64]) -> Result<(f64, Vec<f64>)> {
    if p.len() != z.len() {
        return Err(Error::Loss(format!(
            "prediction has {} dims but target has {}",
            p.len(),
            z.len()
        )));
    }
    let np = libm::sqrt(dot(p, p) + NORM_EPS);
    let nz = libm::sqrt(dot(z, z) + NORM_EPS);
    let diff: Vec<f64> = p.iter().zip(z).map(|(a, b)| a / np - b / nz).collect();
    let value = dot(&diff, &diff).min(4.0);
    // d/dp of ‖p̂ − ẑ‖² with p̂ = p / sqrt(‖p‖² + ε)
    let proj = dot(p, &diff);
    let grad = p
        .iter()
        .zip(&diff)
        .map(|(pi, di)| 2.0 * (di / np - pi * proj / (np * np * np)))
        .collect();
    Ok((value, grad))
}

/// Batch mean of row-wise [`normalized_mse`], with the gradient for `pred`.
pub fn batch_normalized_mse(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::Loss(format!(
            "prediction batch {:?} vs target batch {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let b = pred.rows();
    if b == 0 {
        return Err(Error::Loss("empty batch".into()));
    }
    let mut total = 0.0;
    let mut grad = Tensor::zeros(pred.shape());
    let inv_b = 1.0 / b as f64;
    for i in 0..b {
        let (v, g) = normalized_mse_grad(pred.row(i), target.row(i))?;
        total += v;
        for (dst, gi) in grad.row_mut(i).iter_mut().zip(g) {
            *dst = gi * inv_b;
        }
    }
    Ok((total * inv_b, grad))
}

fn byol_pred(bundle: &ViewBundle) -> Result<&ViewPair<Tensor>> {
    bundle
        .byol_pred
        .as_ref()
        .ok_or_else(|| Error::Loss("bundle has no BYOL predictions".into()))
}

/// Symmetric BYOL term: prediction of v against the target projection of v′,
/// plus prediction of v′ against the target projection of v.
pub fn byol_loss(bundle: &ViewBundle) -> Result<f64> {
    Ok(byol_loss_grad(bundle)?.0)
}

pub fn byol_loss_grad(bundle: &ViewBundle) -> Result<(f64, ViewPair<Tensor>)> {
    let pred = byol_pred(bundle)?;
    let (a, ga) = batch_normalized_mse(&pred.v, &bundle.target.vp.z)?;
    let (b, gb) = batch_normalized_mse(&pred.vp, &bundle.target.v.z)?;
    Ok((a + b, ViewPair { v: ga, vp: gb }))
}

/// Looks up the projection a teaching view refers to.
pub fn target_projection<'a>(
    t: ViewTarget,
    student: &'a ViewBundle,
    teacher: Option<&'a ViewBundle>,
) -> Result<&'a Tensor> {
    let teacher = || {
        teacher.ok_or_else(|| Error::Loss(format!("target `{t}` needs a teacher, but the run has none")))
    };
    Ok(match t {
        ViewTarget::SVp => &student.online.vp.z,
        ViewTarget::ShatV => &student.target.v.z,
        ViewTarget::ShatVp => &student.target.vp.z,
        ViewTarget::TV => &teacher()?.online.v.z,
        ViewTarget::TVp => &teacher()?.online.vp.z,
        ViewTarget::ThatV => &teacher()?.target.v.z,
        ViewTarget::ThatVp => &teacher()?.target.vp.z,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillTerm {
    pub value: f64,
    pub per_target: BTreeMap<ViewTarget, f64>,
    /// Gradient with respect to the distillation head's outputs.
    pub grad: ViewPair<Tensor>,
}

/// Sum over `targets` of the normalized MSE between the student's
/// distillation-head prediction of view v and each named projection. With
/// `symmetric`, the same sum is added with v and v′ exchanged on both sides.
/// Ŝ-v′ is skipped: it is the BYOL term's target and counted there.
pub fn distill_loss(
    student: &ViewBundle,
    teacher: Option<&ViewBundle>,
    targets: ViewTargetSet,
    symmetric: bool,
) -> Result<DistillTerm> {
    let targets = targets.distilled();
    if targets.is_empty() {
        return Err(Error::Loss("distillation needs at least one target view besides Shat_vp".into()));
    }
    let pred = student
        .distill_pred
        .as_ref()
        .ok_or_else(|| Error::Loss("student bundle has no distillation predictions".into()))?;
    let mut per_target = BTreeMap::new();
    let mut grad_v = Tensor::zeros(pred.v.shape());
    let mut grad_vp = Tensor::zeros(pred.vp.shape());
    let mut value = 0.0;
    for t in targets.iter() {
        let (l, g) = batch_normalized_mse(&pred.v, target_projection(t, student, teacher)?)?;
        grad_v.add_assign(&g);
        let mut term = l;
        if symmetric {
            let (ls, gs) = batch_normalized_mse(&pred.vp, swapped_projection(t, student, teacher)?)?;
            grad_vp.add_assign(&gs);
            term += ls;
        }
        value += term;
        per_target.insert(t, term);
    }
    Ok(DistillTerm {
        value,
        per_target,
        grad: ViewPair { v: grad_v, vp: grad_vp },
    })
}

/// The projection named by `t` with the two views exchanged.
fn swapped_projection<'a>(t: ViewTarget, student: &'a ViewBundle, teacher: Option<&'a ViewBundle>) -> Result<&'a Tensor> {
    Ok(match t {
        ViewTarget::SVp => &student.online.v.z,
        ViewTarget::ShatV => &student.target.vp.z,
        ViewTarget::ShatVp => &student.target.v.z,
        ViewTarget::TV => target_projection(ViewTarget::TVp, student, teacher)?,
        ViewTarget::TVp => target_projection(ViewTarget::TV, student, teacher)?,
        ViewTarget::ThatV => target_projection(ViewTarget::ThatVp, student, teacher)?,
        ViewTarget::ThatVp => target_projection(ViewTarget::ThatV, student, teacher)?,
    })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub byol_term: f64,
    pub distill_term: f64,
    pub per_target_terms: BTreeMap<ViewTarget, f64>,
    pub total: f64,
}

impl LossReport {
    pub fn byol_only(value: f64) -> Self {
        Self {
            byol_term: value,
            distill_term: 0.0,
            per_target_terms: BTreeMap::new(),
            total: value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub byol: f64,
    pub distill: f64,
}

/// `byol_weight·BYOL + distill_weight·distillation`, with gradients for the
/// student's two heads. A zero weight drops that head's gradient entirely.
/// A target set without members beyond Ŝ-v′ makes this plain BYOL.
pub fn total_student_loss(
    weights: LossWeights,
    targets: ViewTargetSet,
    symmetric: bool,
    student: &ViewBundle,
    teacher: Option<&ViewBundle>,
) -> Result<(LossReport, HeadGrads)> {
    let (byol, byol_grad) = byol_loss_grad(student)?;
    let mut report = LossReport::byol_only(byol);
    let mut grads = HeadGrads::default();
    if weights.byol != 0.0 {
        grads.byol = Some(scale_pair(byol_grad, weights.byol));
    }
    if !targets.distilled().is_empty() {
        let d = distill_loss(student, teacher, targets, symmetric)?;
        report.distill_term = d.value;
        report.per_target_terms = d.per_target;
        if weights.distill != 0.0 {
            grads.distill = Some(scale_pair(d.grad, weights.distill));
        }
    }
    report.total = weights.byol * report.byol_term + weights.distill * report.distill_term;
    Ok((report, grads))
}

fn scale_pair(mut g: ViewPair<Tensor>, w: f64) -> ViewPair<Tensor> {
    if w != 1.0 {
        for t in [&mut g.v, &mut g.vp] {
            t.data_mut().iter_mut().for_each(|x| *x *= w);
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_opposite_orthogonal() {
        let p = [0.3, -1.2, 2.0];
        assert_eq!(normalized_mse(&p, &p).unwrap(), 0.0);
        let neg: Vec<f64> = p.iter().map(|v| -v).collect();
        assert!((normalized_mse(&p, &neg).unwrap() - 4.0).abs() < 1e-9);
        assert!((normalized_mse(&[1.0, 0.0], &[0.0, 5.0]).unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        assert!(matches!(normalized_mse(&[1.0], &[1.0, 2.0]), Err(Error::Loss(_))));
    }

    #[test]
    fn zero_vector_is_finite() {
        let v = normalized_mse(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!((v - 1.0).abs() < 1e-9);
        let (_, g) = normalized_mse_grad(&[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!(g.iter().all(|x| x.is_finite()));
    }
}
