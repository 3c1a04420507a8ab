//! Online/target branch pairs, the EMA target update and the τ ramp.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::{encoder_spec, Scheme, SchemeConfig};
use crate::error::{Error, Result};
use crate::nn::{Encoder, EncoderTape, LayerSpec, Mlp, MlpSpec, MlpTape, Mode, Module, Param};
use crate::rng::{keyed_rng, Stream};
use crate::tensor::Tensor;

/// Target decay schedule: `τ(k) = 1 − (1 − τ_base)·(cos(πk/K) + 1)/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauSchedule {
    pub tau_base: f64,
    pub total_steps: u64,
    pub current_step: u64,
}

impl TauSchedule {
    pub fn new(tau_base: f64, total_steps: u64) -> Self {
        Self {
            tau_base,
            total_steps: total_steps.max(1),
            current_step: 0,
        }
    }

    pub fn current(&self) -> Result<f64> {
        tau_at(self, self.current_step)
    }
}

pub fn tau_at(schedule: &TauSchedule, k: u64) -> Result<f64> {
    let total = schedule.total_steps;
    if k > total {
        return Err(Error::Schedule { step: k, total });
    }
    if k == 0 {
        return Ok(schedule.tau_base);
    }
    if k == total {
        return Ok(1.0);
    }
    let progress = k as f64 / total as f64;
    let ramp = (libm::cos(core::f64::consts::PI * progress) + 1.0) / 2.0;
    Ok(1.0 - (1.0 - schedule.tau_base) * ramp)
}

/// Encoder, projector and (on online branches only) predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub encoder: Encoder,
    pub projector: Mlp,
    pub predictor: Option<Mlp>,
}

impl Branch {
    pub fn repr_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn proj_dim(&self) -> usize {
        self.projector.d_out()
    }

    /// Parameters that the EMA update tracks: encoder then projector.
    pub fn ema_params(&self) -> Vec<&Param> {
        let mut p = self.encoder.params();
        p.extend(self.projector.params());
        p
    }

    fn ema_params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.encoder.params_mut();
        p.extend(self.projector.params_mut());
        p
    }

    /// Encoder output `y` and projection `z` without recording a tape.
    pub fn embed(&mut self, x: &Tensor, mode: Mode) -> BranchOutput {
        let y = self.encoder.forward(x, mode);
        let z = self.projector.forward(&y, mode);
        BranchOutput { y, z }
    }

    /// Analytic per-layer description for a `[C, H, W]` input.
    pub fn layer_specs(&self, h: usize, w: usize) -> Vec<LayerSpec> {
        let mut s = self.encoder.layer_specs(h, w);
        s.extend(self.projector.layer_specs());
        if let Some(p) = &self.predictor {
            s.extend(p.layer_specs());
        }
        s
    }

    /// A copy without predictor, used to initialize a target branch.
    fn target_copy(&self) -> Self {
        Self {
            encoder: self.encoder.clone(),
            projector: self.projector.clone(),
            predictor: None,
        }
    }
}

impl Module for Branch {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.ema_params();
        if let Some(q) = &self.predictor {
            p.extend(q.params());
        }
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.encoder.params_mut();
        p.extend(self.projector.params_mut());
        if let Some(q) = &mut self.predictor {
            p.extend(q.params_mut());
        }
        p
    }
    fn buffers(&self) -> Vec<&[f64]> {
        let mut b = self.encoder.buffers();
        b.extend(self.projector.buffers());
        if let Some(q) = &self.predictor {
            b.extend(q.buffers());
        }
        b
    }
}

/// An online branch, its EMA target and, for distilling students, a second
/// predictor head used for the distillation targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiameseModel {
    pub online: Branch,
    pub target: Branch,
    pub tau: TauSchedule,
    pub extra_predictor: Option<Mlp>,
}

impl SiameseModel {
    pub fn new(online: Branch, tau: TauSchedule, extra_predictor: Option<Mlp>) -> Self {
        let target = online.target_copy();
        Self {
            online,
            target,
            tau,
            extra_predictor,
        }
    }

    pub fn proj_dim(&self) -> usize {
        self.online.proj_dim()
    }

    /// Gradient-trained parameters: online branch plus the extra head.
    pub fn trainable_params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.online.params_mut();
        if let Some(h) = &mut self.extra_predictor {
            p.extend(h.params_mut());
        }
        p
    }

    pub fn trainable_params(&self) -> Vec<&Param> {
        let mut p = self.online.params();
        if let Some(h) = &self.extra_predictor {
            p.extend(h.params());
        }
        p
    }

    pub fn zero_grad(&mut self) {
        self.trainable_params_mut().into_iter().for_each(Param::zero_grad);
        self.target.zero_grad();
    }

    /// Runs both views through both branches. Online passes are taped; target
    /// passes are not, which is what stops gradients into the target.
    pub fn forward_views(&mut self, v: &Tensor, v_prime: &Tensor) -> Result<(ViewBundle, ForwardTrace)> {
        self.online.encoder.check_input(v)?;
        if v.shape() != v_prime.shape() {
            return Err(Error::Model(format!(
                "view shapes differ: {:?} vs {:?}",
                v.shape(),
                v_prime.shape()
            )));
        }
        let (on_v, tr_v) = self.online_taped(v)?;
        let (on_vp, tr_vp) = self.online_taped(v_prime)?;
        let target = ViewPair {
            v: self.target.embed(v, Mode::Train),
            vp: self.target.embed(v_prime, Mode::Train),
        };
        let bundle = ViewBundle {
            online: ViewPair { v: on_v.out, vp: on_vp.out },
            target,
            byol_pred: Some(ViewPair { v: on_v.byol, vp: on_vp.byol }),
            distill_pred: match (on_v.distill, on_vp.distill) {
                (Some(v), Some(vp)) => Some(ViewPair { v, vp }),
                _ => None,
            },
        };
        Ok((bundle, ForwardTrace { v: tr_v, vp: tr_vp }))
    }

    /// Inference-only pass (running statistics, no tapes, no state change),
    /// used for a frozen teacher.
    pub fn forward_frozen(&mut self, v: &Tensor, v_prime: &Tensor) -> Result<ViewBundle> {
        self.online.encoder.check_input(v)?;
        Ok(ViewBundle {
            online: ViewPair {
                v: self.online.embed(v, Mode::Eval),
                vp: self.online.embed(v_prime, Mode::Eval),
            },
            target: ViewPair {
                v: self.target.embed(v, Mode::Eval),
                vp: self.target.embed(v_prime, Mode::Eval),
            },
            byol_pred: None,
            distill_pred: None,
        })
    }

    fn online_taped(&mut self, x: &Tensor) -> Result<(OnlineOut, ViewTrace)> {
        let (y, enc) = self.online.encoder.forward_taped(x);
        let (z, proj) = self.online.projector.forward_taped(&y);
        let predictor = self
            .online
            .predictor
            .as_mut()
            .ok_or_else(|| Error::Model("online branch has no predictor".into()))?;
        let (byol, pred) = predictor.forward_taped(&z);
        let (distill, extra) = match &mut self.extra_predictor {
            Some(h) => {
                let (d, t) = h.forward_taped(&z);
                (Some(d), Some(t))
            }
            None => (None, None),
        };
        Ok((
            OnlineOut {
                out: BranchOutput { y, z },
                byol,
                distill,
            },
            ViewTrace { enc, proj, pred, extra },
        ))
    }

    /// Backpropagates gradients with respect to the head outputs into the
    /// online branch (and the extra head). Targets are never touched.
    pub fn backward(&mut self, trace: &ForwardTrace, grads: &HeadGrads) -> Result<()> {
        for (tr, gb, gd) in [
            (&trace.v, grads.byol.as_ref().map(|g| &g.v), grads.distill.as_ref().map(|g| &g.v)),
            (&trace.vp, grads.byol.as_ref().map(|g| &g.vp), grads.distill.as_ref().map(|g| &g.vp)),
        ] {
            let mut gz: Option<Tensor> = None;
            if let Some(g) = gb {
                let p = self.online.predictor.as_mut().ok_or_else(|| Error::Model("missing predictor".into()))?;
                gz = Some(p.backward(&tr.pred, g));
            }
            if let Some(g) = gd {
                let (h, t) = match (&mut self.extra_predictor, &tr.extra) {
                    (Some(h), Some(t)) => (h, t),
                    _ => return Err(Error::Model("distillation gradient for a model without a distillation head".into())),
                };
                let gi = h.backward(t, g);
                match &mut gz {
                    Some(acc) => acc.add_assign(&gi),
                    None => gz = Some(gi),
                }
            }
            if let Some(gz) = gz {
                let gy = self.online.projector.backward(&tr.proj, &gz);
                self.online.encoder.backward(&tr.enc, &gy);
            }
        }
        Ok(())
    }
}

impl Module for SiameseModel {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.trainable_params();
        p.extend(self.target.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = Vec::new();
        p.extend(self.online.params_mut());
        if let Some(h) = &mut self.extra_predictor {
            p.extend(h.params_mut());
        }
        p.extend(self.target.params_mut());
        p
    }
    fn buffers(&self) -> Vec<&[f64]> {
        let mut b = self.online.buffers();
        if let Some(h) = &self.extra_predictor {
            b.extend(h.buffers());
        }
        b.extend(self.target.buffers());
        b
    }
}

/// `ξ ← τξ + (1 − τ)θ` over the encoder and projector, with τ taken from the
/// schedule's current step; the step then advances.
pub fn ema_update(model: &mut SiameseModel) -> Result<f64> {
    let tau = model.tau.current()?;
    let online = model.online.ema_params();
    let target = model.target.ema_params_mut();
    if online.len() != target.len() {
        return Err(Error::Model(format!(
            "EMA over {} online vs {} target tensors",
            online.len(),
            target.len()
        )));
    }
    for (xi, theta) in target.into_iter().zip(online) {
        if xi.len() != theta.len() {
            return Err(Error::Model(format!(
                "EMA shape mismatch: {} vs {} values",
                xi.len(),
                theta.len()
            )));
        }
        for (x, t) in xi.value.iter_mut().zip(&theta.value) {
            *x = tau * *x + (1.0 - tau) * t;
        }
    }
    model.tau.current_step += 1;
    Ok(tau)
}

fn head_spec(d: usize, hidden: usize) -> MlpSpec {
    MlpSpec {
        d_in: d,
        hidden,
        d_out: d,
    }
}

fn build(cfg: &SchemeConfig, encoder_name: &str, role: u64, total_steps: u64, extra_head: bool) -> Result<SiameseModel> {
    let spec = encoder_spec(encoder_name, cfg.data.channels)?;
    let m = &cfg.model;
    let mut r = keyed_rng(cfg.seed, Stream::Init, &[role]);
    let encoder = Encoder::new(&spec, &mut r);
    let projector = Mlp::new(
        MlpSpec {
            d_in: spec.output_dim(),
            hidden: m.proj_hidden,
            d_out: m.proj_dim,
        },
        &mut r,
    );
    let predictor = Mlp::new(head_spec(m.proj_dim, m.pred_hidden), &mut r);
    let extra = extra_head.then(|| Mlp::new(head_spec(m.proj_dim, m.pred_hidden), &mut r));
    let online = Branch {
        encoder,
        projector,
        predictor: Some(predictor),
    };
    Ok(SiameseModel::new(online, TauSchedule::new(cfg.tau_base, total_steps), extra))
}

/// Larger encoder, single predictor head.
pub fn build_teacher(cfg: &SchemeConfig, total_steps: u64) -> Result<SiameseModel> {
    build(cfg, &cfg.model.teacher_encoder, 0, total_steps, false)
}

/// Smaller encoder; a second (distillation) head whenever the scheme
/// distills.
pub fn build_student(cfg: &SchemeConfig, total_steps: u64) -> Result<SiameseModel> {
    if cfg.scheme == Scheme::TeacherOnly {
        return Err(Error::config("scheme", "teacher_only runs have no student"));
    }
    build(cfg, &cfg.model.student_encoder, 1, total_steps, !cfg.targets().distilled().is_empty())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewPair<T> {
    pub v: T,
    pub vp: T,
}

impl<T> ViewPair<T> {
    pub fn swapped(self) -> Self {
        Self { v: self.vp, vp: self.v }
    }

    pub fn as_ref(&self) -> ViewPair<&T> {
        ViewPair { v: &self.v, vp: &self.vp }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchOutput {
    /// Representation `y = f(x)`.
    pub y: Tensor,
    /// Projection `z = g(y)`.
    pub z: Tensor,
}

/// Everything one siamese model produces for a pair of views. Target outputs
/// and all projections are plain values: consumers can read them but cannot
/// send gradients into them. Only `byol_pred` and `distill_pred` have tapes
/// behind them (in the accompanying [`ForwardTrace`]).
#[derive(Debug, Clone, PartialEq)]
pub struct ViewBundle {
    pub online: ViewPair<BranchOutput>,
    pub target: ViewPair<BranchOutput>,
    pub byol_pred: Option<ViewPair<Tensor>>,
    pub distill_pred: Option<ViewPair<Tensor>>,
}

impl ViewBundle {
    /// Exchanges the roles of v and v′ everywhere.
    pub fn swapped(self) -> Self {
        Self {
            online: self.online.swapped(),
            target: self.target.swapped(),
            byol_pred: self.byol_pred.map(ViewPair::swapped),
            distill_pred: self.distill_pred.map(ViewPair::swapped),
        }
    }
}

/// Gradients of a scalar loss with respect to each head's outputs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HeadGrads {
    pub byol: Option<ViewPair<Tensor>>,
    pub distill: Option<ViewPair<Tensor>>,
}

struct OnlineOut {
    out: BranchOutput,
    byol: Tensor,
    distill: Option<Tensor>,
}

pub struct ViewTrace {
    enc: EncoderTape,
    proj: MlpTape,
    pred: MlpTape,
    extra: Option<MlpTape>,
}

/// Tapes for the online passes of one [`SiameseModel::forward_views`] call.
pub struct ForwardTrace {
    v: ViewTrace,
    vp: ViewTrace,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::digest;

    fn cfg() -> SchemeConfig {
        let mut c = SchemeConfig::default();
        c.model.teacher_encoder = "mini-resnet-4".into();
        c.model.student_encoder = "mini-resnet-2".into();
        c.model.proj_hidden = 8;
        c.model.proj_dim = 4;
        c.model.pred_hidden = 8;
        c.data.image_size = 6;
        c.validated().unwrap()
    }

    fn views(b: usize) -> (Tensor, Tensor) {
        let mut r = keyed_rng(11, Stream::Init, &[99]);
        let n = b * 3 * 6 * 6;
        let v = Tensor::from_vec(&[b, 3, 6, 6], (0..n).map(|_| crate::rng::normal(&mut r)).collect());
        let vp = Tensor::from_vec(&[b, 3, 6, 6], (0..n).map(|_| crate::rng::normal(&mut r)).collect());
        (v, vp)
    }

    #[test]
    fn tau_endpoints_and_midpoint() {
        let s = TauSchedule::new(0.99, 100);
        assert_eq!(tau_at(&s, 0).unwrap(), 0.99);
        assert_eq!(tau_at(&s, 100).unwrap(), 1.0);
        assert!((tau_at(&s, 50).unwrap() - 0.995).abs() < 1e-12);
        assert!(matches!(tau_at(&s, 101), Err(Error::Schedule { .. })));
    }

    #[test]
    fn ema_scalar_cases() {
        let mut m = build_teacher(&cfg(), 10).unwrap();
        let set = |m: &mut SiameseModel, xi: f64, theta: f64| {
            m.target.ema_params_mut().into_iter().for_each(|p| p.value.iter_mut().for_each(|v| *v = xi));
            m.online.ema_params_mut().into_iter().for_each(|p| p.value.iter_mut().for_each(|v| *v = theta));
        };
        set(&mut m, 1.0, 0.0);
        ema_update(&mut m).unwrap();
        assert!(m.target.ema_params().iter().all(|p| p.value.iter().all(|&v| v == 0.99)));

        m.tau = TauSchedule { tau_base: 0.0, total_steps: 10, current_step: 0 };
        set(&mut m, 1.0, 0.25);
        ema_update(&mut m).unwrap();
        assert!(m.target.ema_params().iter().all(|p| p.value.iter().all(|&v| v == 0.25)));

        m.tau.current_step = 10;
        set(&mut m, 0.5, 0.25);
        let before = digest(&m.target);
        ema_update(&mut m).unwrap();
        assert_eq!(digest(&m.target), before);
    }

    #[test]
    fn fresh_model_target_matches_online() {
        let mut m = build_teacher(&cfg(), 10).unwrap();
        let (v, vp) = views(4);
        let (b, _) = m.forward_views(&v, &vp).unwrap();
        assert_eq!(b.online.v.z, b.target.v.z);
        assert_eq!(b.online.vp.y, b.target.vp.y);
        let p = b.byol_pred.unwrap();
        assert_eq!(p.v.shape(), b.online.v.z.shape());
    }

    #[test]
    fn identical_views_give_identical_projections() {
        let mut m = build_student(&cfg(), 10).unwrap();
        let (v, _) = views(3);
        let (b, _) = m.forward_views(&v, &v).unwrap();
        assert_eq!(b.online.v.z, b.online.vp.z);
        assert_eq!(b.target.v.z, b.target.vp.z);
    }

    #[test]
    fn heads_and_capacity() {
        let c = cfg();
        let t = build_teacher(&c, 10).unwrap();
        let s = build_student(&c, 10).unwrap();
        assert!(t.online.predictor.is_some() && t.extra_predictor.is_none());
        assert!(t.target.predictor.is_none());
        assert!(s.extra_predictor.is_some());
        assert!(t.online.encoder.num_params() > s.online.encoder.num_params());
        let only = SchemeConfig { scheme: Scheme::TeacherOnly, ..c };
        assert!(build_student(&only, 10).is_err());
    }

    #[test]
    fn shape_mismatch_is_a_model_error() {
        let mut m = build_teacher(&cfg(), 10).unwrap();
        let bad = Tensor::zeros(&[2, 1, 6, 6]);
        assert!(matches!(m.forward_views(&bad, &bad), Err(Error::Model(_))));
    }
}
