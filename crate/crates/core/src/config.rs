//! Experiment configuration: scheme selection, teaching-view sets and all
//! hyperparameters, plus the validation that turns a parsed document into a
//! fully resolved [`SchemeConfig`].

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{EncoderSpec, StageSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    TeacherOnly,
    SimdisOff,
    SimdisOn,
    #[serde(rename = "simdis_on_7v")]
    SimdisOn7v,
    Custom,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::TeacherOnly => "teacher_only",
            Scheme::SimdisOff => "simdis_off",
            Scheme::SimdisOn => "simdis_on",
            Scheme::SimdisOn7v => "simdis_on_7v",
            Scheme::Custom => "custom",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Whether a distilling student trains next to its teacher or after it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    Online,
    Offline,
}

/// One of the seven projections a student can be asked to predict from its
/// view `v`. `S` is the student online branch, `Shat` its EMA target, `T` the
/// teacher online branch and `That` the teacher target; `v`/`vp` name the
/// augmented view (`vp` = v′).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ViewTarget {
    #[serde(rename = "S_vp")]
    SVp,
    #[serde(rename = "Shat_v")]
    ShatV,
    #[serde(rename = "Shat_vp")]
    ShatVp,
    #[serde(rename = "T_v")]
    TV,
    #[serde(rename = "T_vp")]
    TVp,
    #[serde(rename = "That_v")]
    ThatV,
    #[serde(rename = "That_vp")]
    ThatVp,
}

impl ViewTarget {
    pub const ALL: [ViewTarget; 7] = [
        ViewTarget::SVp,
        ViewTarget::ShatV,
        ViewTarget::ShatVp,
        ViewTarget::TV,
        ViewTarget::TVp,
        ViewTarget::ThatV,
        ViewTarget::ThatVp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ViewTarget::SVp => "S_vp",
            ViewTarget::ShatV => "Shat_v",
            ViewTarget::ShatVp => "Shat_vp",
            ViewTarget::TV => "T_v",
            ViewTarget::TVp => "T_vp",
            ViewTarget::ThatV => "That_v",
            ViewTarget::ThatVp => "That_vp",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }

    pub fn is_teacher(self) -> bool {
        matches!(
            self,
            ViewTarget::TV | ViewTarget::TVp | ViewTarget::ThatV | ViewTarget::ThatVp
        )
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

impl fmt::Display for ViewTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A subset of the seven teaching views. Iteration order is fixed
/// (the order of [`ViewTarget::ALL`]), which fixes loss reduction order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<ViewTarget>", into = "Vec<ViewTarget>")]
pub struct ViewTargetSet(u8);

impl ViewTargetSet {
    pub const fn empty() -> Self {
        Self(0)
    }

    pub const fn full() -> Self {
        Self(0x7f)
    }

    pub fn single(t: ViewTarget) -> Self {
        Self(t.bit())
    }

    /// Fails on duplicates.
    pub fn from_targets(targets: &[ViewTarget]) -> Result<Self> {
        let mut set = Self::empty();
        for &t in targets {
            if !set.insert(t) {
                return Err(Error::config(
                    "view_targets",
                    format!("`{t}` listed more than once"),
                ));
            }
        }
        Ok(set)
    }

    /// Returns false if `t` was already present.
    pub fn insert(&mut self, t: ViewTarget) -> bool {
        let fresh = self.0 & t.bit() == 0;
        self.0 |= t.bit();
        fresh
    }

    pub fn contains(&self, t: ViewTarget) -> bool {
        self.0 & t.bit() != 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = ViewTarget> + '_ {
        ViewTarget::ALL.into_iter().filter(|t| self.contains(*t))
    }

    /// Members that add a distillation term. Ŝ-v′ is the BYOL target and is
    /// always counted once, inside the BYOL term.
    pub fn distilled(&self) -> Self {
        Self(self.0 & !ViewTarget::ShatVp.bit())
    }

    pub fn needs_teacher(&self) -> bool {
        self.iter().any(ViewTarget::is_teacher)
    }

    /// Compact label such as `That_v+That_vp`, or `none`.
    pub fn label(&self) -> String {
        if self.is_empty() {
            return String::from("none");
        }
        let names: Vec<&str> = self.iter().map(ViewTarget::name).collect();
        names.join("+")
    }
}

impl TryFrom<Vec<ViewTarget>> for ViewTargetSet {
    type Error = Error;
    fn try_from(v: Vec<ViewTarget>) -> Result<Self> {
        Self::from_targets(&v)
    }
}

impl From<ViewTargetSet> for Vec<ViewTarget> {
    fn from(s: ViewTargetSet) -> Self {
        s.iter().collect()
    }
}

/// Distillation targets implied by a named scheme.
pub fn canonical_scheme_targets(scheme: Scheme) -> Result<ViewTargetSet> {
    match scheme {
        Scheme::SimdisOn | Scheme::SimdisOff => Ok(ViewTargetSet::single(ViewTarget::ThatVp)),
        Scheme::SimdisOn7v => Ok(ViewTargetSet::full()),
        Scheme::TeacherOnly => Err(Error::config(
            "scheme",
            "teacher_only trains no student, so it has no distillation targets",
        )),
        Scheme::Custom => Err(Error::config(
            "scheme",
            "custom schemes take their targets from `view_targets`",
        )),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory (resolved by the IO layer).
    pub dataset: String,
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    /// Global augmentation strength in `[0, 1]`; 0 disables every transform.
    pub aug_strength: f64,
    pub crop_scale_min: f64,
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: String::from("data/shapes"),
            image_size: 16,
            channels: 3,
            num_classes: 10,
            aug_strength: 1.0,
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub teacher_encoder: String,
    pub student_encoder: String,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub pred_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            teacher_encoder: String::from("mini-resnet-16"),
            student_encoder: String::from("mini-resnet-8"),
            proj_hidden: 64,
            proj_dim: 32,
            pred_hidden: 64,
        }
    }
}

/// Resolves an encoder name. `mini-resnet-<w>` is a 3×3 stem of width `w`
/// followed by two stride-2 residual stages of widths `w` and `2w`.
pub fn encoder_spec(name: &str, in_channels: usize) -> Result<EncoderSpec> {
    let width = name
        .strip_prefix("mini-resnet-")
        .and_then(|w| w.parse::<usize>().ok())
        .filter(|w| *w > 0)
        .ok_or_else(|| {
            Error::config(
                "model.encoder",
                format!("unknown encoder `{name}` (expected mini-resnet-<width>)"),
            )
        })?;
    Ok(EncoderSpec {
        in_channels,
        stem_width: width,
        stages: alloc::vec![
            StageSpec { width, stride: 2 },
            StageSpec {
                width: 2 * width,
                stride: 2,
            },
        ],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    /// Batch size at which `base_lr` applies; the peak rate is
    /// `base_lr * batch_size / lr_reference_batch`.
    pub lr_reference_batch: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_epochs: 2,
            lr_reference_batch: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub knn_k: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.001,
            momentum: 0.9,
            batch_size: 64,
            knn_k: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemeConfig {
    pub scheme: Scheme,
    /// Explicit teaching views. Filled from the scheme during validation.
    pub view_targets: Option<ViewTargetSet>,
    /// Only meaningful for `custom`.
    pub distill_mode: DistillMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub tau_base: f64,
    pub seed: u64,
    pub distill_weight: f64,
    pub byol_weight: f64,
    /// Pretrained teacher for offline distillation.
    pub teacher_checkpoint: Option<String>,
    /// Offline runs without a checkpoint train the teacher first.
    pub pretrain_teacher: bool,
    /// Also predict the swapped targets from the student's view v′.
    pub symmetric_distill: bool,
    /// Online teacher and student see the same augmented pair.
    pub shared_views: bool,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub probe: ProbeConfig,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::SimdisOn,
            view_targets: None,
            distill_mode: DistillMode::Online,
            epochs: 20,
            batch_size: 64,
            base_lr: 0.05,
            tau_base: 0.99,
            seed: 0,
            distill_weight: 1.0,
            byol_weight: 1.0,
            teacher_checkpoint: None,
            pretrain_teacher: false,
            symmetric_distill: false,
            shared_views: true,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

fn check(cond: bool, field: &'static str, reason: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::config(field, reason))
    }
}

impl SchemeConfig {
    /// Distillation targets after validation (empty for BYOL-only runs).
    pub fn targets(&self) -> ViewTargetSet {
        self.view_targets.unwrap_or_default()
    }

    pub fn trains_student(&self) -> bool {
        self.scheme != Scheme::TeacherOnly
    }

    /// Student and teacher live in the same loop.
    pub fn is_online(&self) -> bool {
        match self.scheme {
            Scheme::SimdisOn | Scheme::SimdisOn7v => true,
            Scheme::Custom => self.distill_mode == DistillMode::Online && self.targets().needs_teacher(),
            _ => false,
        }
    }

    pub fn is_offline(&self) -> bool {
        match self.scheme {
            Scheme::SimdisOff => true,
            Scheme::Custom => self.distill_mode == DistillMode::Offline && self.targets().needs_teacher(),
            _ => false,
        }
    }

    /// Checks every invariant and fills scheme-implied defaults.
    pub fn validated(mut self) -> Result<Self> {
        check(self.epochs >= 1, "epochs", "must be at least 1")?;
        check(
            self.batch_size >= 2,
            "batch_size",
            "must be at least 2 (batch normalization needs batch statistics)",
        )?;
        check(
            self.base_lr.is_finite() && self.base_lr > 0.0,
            "base_lr",
            "must be a positive finite number",
        )?;
        check(
            (0.0..1.0).contains(&self.tau_base),
            "tau_base",
            "must lie in [0, 1)",
        )?;
        check(
            self.distill_weight.is_finite() && self.distill_weight >= 0.0,
            "distill_weight",
            "must be nonnegative",
        )?;
        check(
            self.byol_weight.is_finite() && self.byol_weight >= 0.0,
            "byol_weight",
            "must be nonnegative",
        )?;

        let d = &self.data;
        check(d.image_size >= 4, "data.image_size", "must be at least 4")?;
        check(d.channels >= 1, "data.channels", "must be positive")?;
        check(d.num_classes >= 2, "data.num_classes", "must be at least 2")?;
        check(
            (0.0..=1.0).contains(&d.aug_strength),
            "data.aug_strength",
            "must lie in [0, 1]",
        )?;
        check(
            d.crop_scale_min > 0.0 && d.crop_scale_min <= 1.0,
            "data.crop_scale_min",
            "must lie in (0, 1]",
        )?;
        for (v, name) in [
            (d.flip_prob, "data.flip_prob"),
            (d.jitter_prob, "data.jitter_prob"),
            (d.grayscale_prob, "data.grayscale_prob"),
            (d.blur_prob, "data.blur_prob"),
        ] {
            check((0.0..=1.0).contains(&v), name, "probability must lie in [0, 1]")?;
        }
        for (v, name) in [
            (d.brightness, "data.brightness"),
            (d.contrast, "data.contrast"),
            (d.saturation, "data.saturation"),
        ] {
            check((0.0..1.0).contains(&v), name, "jitter magnitude must lie in [0, 1)")?;
        }

        let m = &self.model;
        encoder_spec(&m.teacher_encoder, d.channels)?;
        encoder_spec(&m.student_encoder, d.channels)?;
        check(m.proj_hidden >= 1, "model.proj_hidden", "must be positive")?;
        check(m.proj_dim >= 1, "model.proj_dim", "must be positive")?;
        check(m.pred_hidden >= 1, "model.pred_hidden", "must be positive")?;

        let o = &self.optimizer;
        check(
            (0.0..1.0).contains(&o.momentum),
            "optimizer.momentum",
            "must lie in [0, 1)",
        )?;
        check(
            o.weight_decay.is_finite() && o.weight_decay >= 0.0,
            "optimizer.weight_decay",
            "must be nonnegative",
        )?;
        check(
            o.lr_reference_batch >= 1,
            "optimizer.lr_reference_batch",
            "must be positive",
        )?;

        let p = &self.probe;
        check(p.epochs >= 1, "probe.epochs", "must be at least 1")?;
        check(p.lr.is_finite() && p.lr > 0.0, "probe.lr", "must be positive")?;
        check(p.batch_size >= 1, "probe.batch_size", "must be positive")?;
        check(p.knn_k >= 1, "probe.knn_k", "must be positive")?;

        self.view_targets = Some(self.resolve_targets()?);

        if self.is_offline() {
            check(
                self.teacher_checkpoint.is_some() || self.pretrain_teacher,
                "teacher_checkpoint",
                "offline distillation needs a teacher checkpoint or pretrain_teacher = true",
            )?;
        }
        Ok(self)
    }

    fn resolve_targets(&self) -> Result<ViewTargetSet> {
        let given = self.view_targets;
        match self.scheme {
            Scheme::TeacherOnly => {
                check(
                    given.is_none_or(|s| s.is_empty()),
                    "view_targets",
                    "teacher_only trains no student",
                )?;
                Ok(ViewTargetSet::empty())
            }
            Scheme::SimdisOn7v => {
                let full = canonical_scheme_targets(self.scheme)?;
                check(
                    given.is_none_or(|s| s == full),
                    "view_targets",
                    "simdis_on_7v always uses all seven teaching views",
                )?;
                Ok(full)
            }
            Scheme::SimdisOn | Scheme::SimdisOff => match given {
                None => canonical_scheme_targets(self.scheme),
                Some(s) => {
                    check(
                        s.len() == 1 && s.needs_teacher(),
                        "view_targets",
                        "single-view schemes take exactly one teacher view",
                    )?;
                    Ok(s)
                }
            },
            Scheme::Custom => given.ok_or_else(|| {
                Error::config("view_targets", "custom schemes must list their targets")
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seven_view_scheme_fills_full_set() {
        let cfg = SchemeConfig {
            scheme: Scheme::SimdisOn7v,
            ..Default::default()
        }
        .validated()
        .unwrap();
        assert_eq!(cfg.targets(), ViewTargetSet::full());
        assert_eq!(cfg.targets().len(), 7);
    }

    #[test]
    fn tau_out_of_range_is_rejected() {
        let err = SchemeConfig {
            tau_base: 1.5,
            ..Default::default()
        }
        .validated()
        .unwrap_err();
        assert!(matches!(err, Error::Config { field: "tau_base", .. }));
    }

    #[test]
    fn offline_without_teacher_source_is_rejected() {
        let cfg = SchemeConfig {
            scheme: Scheme::SimdisOff,
            ..Default::default()
        };
        let err = cfg.clone().validated().unwrap_err();
        assert!(matches!(err, Error::Config { field: "teacher_checkpoint", .. }));
        assert!(SchemeConfig {
            pretrain_teacher: true,
            ..cfg.clone()
        }
        .validated()
        .is_ok());
        assert!(SchemeConfig {
            teacher_checkpoint: Some("t.json".into()),
            ..cfg
        }
        .validated()
        .is_ok());
    }

    #[test]
    fn partial_seven_view_set_is_rejected() {
        let cfg = SchemeConfig {
            scheme: Scheme::SimdisOn7v,
            view_targets: Some(ViewTargetSet::single(ViewTarget::ThatVp)),
            ..Default::default()
        };
        assert!(cfg.validated().is_err());
    }

    #[test]
    fn canonical_targets() {
        assert_eq!(
            canonical_scheme_targets(Scheme::SimdisOn).unwrap(),
            ViewTargetSet::single(ViewTarget::ThatVp)
        );
        assert_eq!(
            canonical_scheme_targets(Scheme::SimdisOff).unwrap(),
            ViewTargetSet::single(ViewTarget::ThatVp)
        );
        let full: Vec<_> = canonical_scheme_targets(Scheme::SimdisOn7v).unwrap().iter().collect();
        assert_eq!(full, ViewTarget::ALL.to_vec());
        assert!(canonical_scheme_targets(Scheme::TeacherOnly).is_err());
    }

    #[test]
    fn duplicate_targets_are_rejected() {
        assert!(ViewTargetSet::from_targets(&[ViewTarget::TV, ViewTarget::TV]).is_err());
    }

    #[test]
    fn unknown_encoder_is_a_config_error() {
        assert!(encoder_spec("resnet50", 3).is_err());
        assert!(encoder_spec("mini-resnet-0", 3).is_err());
        assert_eq!(encoder_spec("mini-resnet-8", 3).unwrap().output_dim(), 16);
    }
}
