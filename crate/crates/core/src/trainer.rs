//! Training loops for the teacher-only, offline and online schemes.
//!
//! All state needed to continue a run lives in [`RunState`]; every random draw
//! is keyed by `(seed, epoch, index)`, so resuming from a saved state at an
//! epoch boundary reproduces an uninterrupted run exactly.

use alloc::format;
use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::config::{Scheme, SchemeConfig};
use crate::data::{iterate_epoch, num_batches, AugmentParams, Batch, ImageDataset, Normalization, Split};
use crate::error::{Error, Result};
use crate::losses::{byol_loss_grad, total_student_loss, LossReport, LossWeights};
use crate::models::{build_student, build_teacher, ema_update, HeadGrads, SiameseModel, ViewBundle};
use crate::nn::digest;
use crate::optim::{step_lr, LrSchedule, Sgd};
use crate::rng::Stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Teacher alone (teacher_only runs and the first offline stage).
    Teacher,
    /// Student alone, with a frozen teacher or none at all.
    Student,
    /// Teacher and student side by side.
    Online,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Step,
    Epoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub kind: RecordKind,
    pub step: u64,
    pub epoch: usize,
    pub role: Role,
    pub scheme: Scheme,
    pub loss: LossReport,
    pub lr: f64,
    pub tau: f64,
}

/// A model with its optimizer and learning-rate schedule. The model's EMA
/// step counter doubles as its optimizer step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub model: SiameseModel,
    pub opt: Sgd,
    pub lr: LrSchedule,
    pub frozen: bool,
}

impl ModelState {
    fn new(model: SiameseModel, cfg: &SchemeConfig, steps_per_epoch: u64) -> Self {
        let total = model.tau.total_steps;
        let warmup = cfg.optimizer.warmup_epochs as u64 * steps_per_epoch;
        Self {
            model,
            opt: Sgd::new(cfg.optimizer.momentum, cfg.optimizer.weight_decay),
            lr: LrSchedule::new(cfg.base_lr, cfg.batch_size, cfg.optimizer.lr_reference_batch, warmup, total),
            frozen: false,
        }
    }

    pub fn step(&self) -> u64 {
        self.model.tau.current_step
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub cfg: SchemeConfig,
    pub stage: Stage,
    /// Completed epochs within the current stage.
    pub epoch: usize,
    pub global_step: u64,
    pub steps_per_epoch: u64,
    pub teacher: Option<ModelState>,
    pub student: Option<ModelState>,
    /// Digest of the frozen teacher, recorded when it was frozen.
    pub frozen_teacher_digest: Option<u64>,
}

/// Callbacks for metrics and checkpoints. All methods default to no-ops.
pub trait RunObserver {
    fn on_record(&mut self, _record: &MetricsRecord) {}
    fn on_epoch_end(&mut self, _state: &RunState) {}
    /// Called with the state just before a divergence error is returned.
    fn on_divergence(&mut self, _state: &RunState) {}
}

impl RunObserver for () {}

/// Collects records in memory.
impl RunObserver for alloc::vec::Vec<MetricsRecord> {
    fn on_record(&mut self, record: &MetricsRecord) {
        self.push(record.clone());
    }
}

impl RunState {
    /// Fresh state for `cfg` (already validated). Offline runs given a
    /// pretrained `teacher` skip straight to the student stage.
    pub fn new(cfg: SchemeConfig, train_len: usize, teacher: Option<SiameseModel>) -> Result<Self> {
        if train_len == 0 {
            return Err(Error::Data("training set is empty".into()));
        }
        let spe = num_batches(train_len, cfg.batch_size) as u64;
        let total = spe * cfg.epochs as u64;
        let mut state = Self {
            cfg: cfg.clone(),
            stage: Stage::Done,
            epoch: 0,
            global_step: 0,
            steps_per_epoch: spe,
            teacher: None,
            student: None,
            frozen_teacher_digest: None,
        };
        let targets = cfg.targets();
        match cfg.scheme {
            Scheme::TeacherOnly => {
                state.teacher = Some(ModelState::new(build_teacher(&cfg, total)?, &cfg, spe));
                state.stage = Stage::Teacher;
            }
            _ if cfg.is_online() => {
                state.teacher = Some(ModelState::new(build_teacher(&cfg, total)?, &cfg, spe));
                state.student = Some(ModelState::new(build_student(&cfg, total)?, &cfg, spe));
                state.stage = Stage::Online;
            }
            _ if cfg.is_offline() => {
                state.student = Some(ModelState::new(build_student(&cfg, total)?, &cfg, spe));
                match teacher {
                    Some(t) => {
                        check_compatible(&t, state.student.as_ref().map(|s| &s.model))?;
                        state.teacher = Some(ModelState::new(t, &cfg, spe));
                        state.freeze_teacher();
                        state.stage = Stage::Student;
                    }
                    None if cfg.pretrain_teacher => {
                        state.teacher = Some(ModelState::new(build_teacher(&cfg, total)?, &cfg, spe));
                        state.stage = Stage::Teacher;
                    }
                    None => {
                        return Err(Error::config(
                            "teacher_checkpoint",
                            "offline distillation needs a teacher checkpoint or pretrain_teacher = true",
                        ))
                    }
                }
            }
            _ => {
                // A student without distillation targets is trained with BYOL alone.
                debug_assert!(targets.is_empty() || !targets.needs_teacher());
                state.student = Some(ModelState::new(build_student(&cfg, total)?, &cfg, spe));
                state.stage = Stage::Student;
            }
        }
        Ok(state)
    }

    fn freeze_teacher(&mut self) {
        if let Some(t) = &mut self.teacher {
            t.frozen = true;
            self.frozen_teacher_digest = Some(digest(&t.model));
        }
    }

    pub fn is_done(&self) -> bool {
        self.stage == Stage::Done
    }

    fn stage_epochs(&self) -> usize {
        self.cfg.epochs
    }
}

fn check_compatible(teacher: &SiameseModel, student: Option<&SiameseModel>) -> Result<()> {
    if let Some(s) = student {
        if teacher.proj_dim() != s.proj_dim() {
            return Err(Error::config(
                "model.proj_dim",
                format!(
                    "teacher projects to {} dims but the student to {}",
                    teacher.proj_dim(),
                    s.proj_dim()
                ),
            ));
        }
    }
    Ok(())
}

/// Shared read-only inputs of a run.
pub struct TrainData<'a> {
    pub train: &'a ImageDataset,
    pub norm: &'a Normalization,
}

fn views(batch: &Batch) -> Result<(&Tensor, &Tensor)> {
    let vp = batch
        .v_prime
        .as_ref()
        .ok_or_else(|| Error::Data(String::from("training batch without a second view")))?;
    Ok((&batch.v, vp))
}

fn diverged(report: &LossReport, step: u64) -> Result<()> {
    if report.total.is_finite() && report.byol_term.is_finite() && report.distill_term.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { what: "loss", step })
    }
}

/// One BYOL step on a teacher (or a student with no targets). Returns the
/// loss, the pre-update bundle, the learning rate and τ used.
fn byol_step(ms: &mut ModelState, batch: &Batch, step: u64) -> Result<(LossReport, ViewBundle, f64, f64)> {
    let (v, vp) = views(batch)?;
    ms.model.zero_grad();
    let (bundle, trace) = ms.model.forward_views(v, vp)?;
    let (loss, grad) = byol_loss_grad(&bundle)?;
    let report = LossReport::byol_only(loss);
    diverged(&report, step)?;
    ms.model.backward(
        &trace,
        &HeadGrads {
            byol: Some(grad),
            distill: None,
        },
    )?;
    let lr = step_lr(&ms.lr, ms.step());
    ms.opt.step(ms.model.trainable_params_mut(), lr)?;
    let tau = ema_update(&mut ms.model)?;
    Ok((report, bundle, lr, tau))
}

/// One student step against an optional teacher bundle.
fn student_step(
    ms: &mut ModelState,
    cfg: &SchemeConfig,
    batch: &Batch,
    teacher: Option<&ViewBundle>,
    step: u64,
) -> Result<(LossReport, f64, f64)> {
    let (v, vp) = views(batch)?;
    ms.model.zero_grad();
    let (bundle, trace) = ms.model.forward_views(v, vp)?;
    let weights = LossWeights {
        byol: cfg.byol_weight,
        distill: cfg.distill_weight,
    };
    let (report, grads) = total_student_loss(weights, cfg.targets(), cfg.symmetric_distill, &bundle, teacher)?;
    diverged(&report, step)?;
    ms.model.backward(&trace, &grads)?;
    let lr = step_lr(&ms.lr, ms.step());
    ms.opt.step(ms.model.trainable_params_mut(), lr)?;
    let tau = ema_update(&mut ms.model)?;
    Ok((report, lr, tau))
}

struct EpochMean {
    sum: LossReport,
    n: usize,
    lr: f64,
    tau: f64,
}

impl EpochMean {
    fn new() -> Self {
        Self {
            sum: LossReport::default(),
            n: 0,
            lr: 0.0,
            tau: 0.0,
        }
    }

    fn add(&mut self, r: &LossReport, lr: f64, tau: f64) {
        self.sum.byol_term += r.byol_term;
        self.sum.distill_term += r.distill_term;
        self.sum.total += r.total;
        for (k, v) in &r.per_target_terms {
            *self.sum.per_target_terms.entry(*k).or_insert(0.0) += v;
        }
        self.n += 1;
        self.lr = lr;
        self.tau = tau;
    }

    fn record(&self, role: Role, state: &RunState) -> MetricsRecord {
        let n = self.n.max(1) as f64;
        let mut loss = self.sum.clone();
        loss.byol_term /= n;
        loss.distill_term /= n;
        loss.total /= n;
        loss.per_target_terms.values_mut().for_each(|v| *v /= n);
        MetricsRecord {
            kind: RecordKind::Epoch,
            step: state.global_step,
            epoch: state.epoch,
            role,
            scheme: state.cfg.scheme,
            loss,
            lr: self.lr,
            tau: self.tau,
        }
    }
}

fn record(kind: RecordKind, state: &RunState, role: Role, loss: LossReport, lr: f64, tau: f64) -> MetricsRecord {
    MetricsRecord {
        kind,
        step: state.global_step,
        epoch: state.epoch,
        role,
        scheme: state.cfg.scheme,
        loss,
        lr,
        tau,
    }
}

fn fail<O: RunObserver>(state: &RunState, obs: &mut O, e: Error) -> Error {
    if matches!(e, Error::Divergence { .. }) {
        obs.on_divergence(state);
    }
    e
}

fn run_epoch<O: RunObserver>(state: &mut RunState, data: &TrainData<'_>, obs: &mut O) -> Result<()> {
    let cfg = state.cfg.clone();
    let params = AugmentParams::from(&cfg.data);
    let epoch = state.epoch as u64;
    let teacher_stream = Stream::Views;
    let student_stream = if cfg.shared_views { Stream::Views } else { Stream::StudentViews };
    let batches = |stream| iterate_epoch(data.train, Split::Train, params, data.norm, cfg.batch_size, cfg.seed, epoch, stream);

    let mut t_mean = EpochMean::new();
    let mut s_mean = EpochMean::new();
    match state.stage {
        Stage::Teacher => {
            for batch in batches(teacher_stream)? {
                let batch = batch?;
                let step = state.global_step;
                let ms = state.teacher.as_mut().ok_or_else(|| Error::Model("no teacher".into()))?;
                let (rep, _, lr, tau) = byol_step(ms, &batch, step).map_err(|e| fail(state, obs, e))?;
                t_mean.add(&rep, lr, tau);
                obs.on_record(&record(RecordKind::Step, state, Role::Teacher, rep, lr, tau));
                state.global_step += 1;
            }
            obs.on_record(&t_mean.record(Role::Teacher, state));
        }
        Stage::Online => {
            let mut s_batches = if cfg.shared_views { None } else { Some(batches(student_stream)?) };
            for batch in batches(teacher_stream)? {
                let batch = batch?;
                let step = state.global_step;
                let teacher = state.teacher.as_mut().ok_or_else(|| Error::Model("no teacher".into()))?;
                let (t_rep, t_bundle, t_lr, t_tau) = byol_step(teacher, &batch, step).map_err(|e| fail(state, obs, e))?;
                let s_batch = match &mut s_batches {
                    Some(it) => it.next().ok_or_else(|| Error::Data("student batches ran out".into()))??,
                    None => batch,
                };
                let student = state.student.as_mut().ok_or_else(|| Error::Model("no student".into()))?;
                let (s_rep, s_lr, s_tau) =
                    student_step(student, &cfg, &s_batch, Some(&t_bundle), step).map_err(|e| fail(state, obs, e))?;
                t_mean.add(&t_rep, t_lr, t_tau);
                s_mean.add(&s_rep, s_lr, s_tau);
                obs.on_record(&record(RecordKind::Step, state, Role::Teacher, t_rep, t_lr, t_tau));
                obs.on_record(&record(RecordKind::Step, state, Role::Student, s_rep, s_lr, s_tau));
                state.global_step += 1;
            }
            obs.on_record(&t_mean.record(Role::Teacher, state));
            obs.on_record(&s_mean.record(Role::Student, state));
        }
        Stage::Student => {
            for batch in batches(student_stream)? {
                let batch = batch?;
                let step = state.global_step;
                let t_bundle = match &mut state.teacher {
                    Some(t) => {
                        let (v, vp) = views(&batch)?;
                        Some(t.model.forward_frozen(v, vp)?)
                    }
                    None => None,
                };
                let student = state.student.as_mut().ok_or_else(|| Error::Model("no student".into()))?;
                let (rep, lr, tau) =
                    student_step(student, &cfg, &batch, t_bundle.as_ref(), step).map_err(|e| fail(state, obs, e))?;
                s_mean.add(&rep, lr, tau);
                obs.on_record(&record(RecordKind::Step, state, Role::Student, rep, lr, tau));
                state.global_step += 1;
            }
            if let (Some(t), Some(d)) = (&state.teacher, state.frozen_teacher_digest) {
                if digest(&t.model) != d {
                    return Err(Error::Model("frozen teacher parameters changed during distillation".into()));
                }
            }
            obs.on_record(&s_mean.record(Role::Student, state));
        }
        Stage::Done => {}
    }
    Ok(())
}

/// Runs (or resumes) until every stage is complete.
pub fn run<O: RunObserver>(state: &mut RunState, data: &TrainData<'_>, obs: &mut O) -> Result<()> {
    while !state.is_done() {
        if state.epoch >= state.stage_epochs() {
            advance_stage(state);
            continue;
        }
        run_epoch(state, data, obs)?;
        state.epoch += 1;
        obs.on_epoch_end(state);
    }
    Ok(())
}

/// Runs at most `epochs` more epochs (used to stop a run part way).
pub fn run_epochs<O: RunObserver>(state: &mut RunState, data: &TrainData<'_>, obs: &mut O, epochs: usize) -> Result<()> {
    let mut left = epochs;
    while !state.is_done() && left > 0 {
        if state.epoch >= state.stage_epochs() {
            advance_stage(state);
            continue;
        }
        run_epoch(state, data, obs)?;
        state.epoch += 1;
        left -= 1;
        obs.on_epoch_end(state);
    }
    if state.epoch >= state.stage_epochs() && !state.is_done() {
        advance_stage(state);
    }
    Ok(())
}

fn advance_stage(state: &mut RunState) {
    state.stage = match state.stage {
        Stage::Teacher if state.cfg.is_offline() => {
            state.freeze_teacher();
            state.epoch = 0;
            Stage::Student
        }
        _ => Stage::Done,
    };
}

/// Teacher-only BYOL pretraining.
pub fn train_teacher<O: RunObserver>(cfg: &SchemeConfig, data: &TrainData<'_>, obs: &mut O) -> Result<RunState> {
    let cfg = SchemeConfig {
        scheme: Scheme::TeacherOnly,
        view_targets: None,
        ..cfg.clone()
    }
    .validated()?;
    let mut state = RunState::new(cfg, data.train.len(), None)?;
    run(&mut state, data, obs)?;
    Ok(state)
}

/// Second offline stage: the student learns from a fixed, pretrained teacher.
pub fn train_offline_student<O: RunObserver>(
    cfg: &SchemeConfig,
    data: &TrainData<'_>,
    teacher: SiameseModel,
    obs: &mut O,
) -> Result<RunState> {
    if !cfg.is_offline() {
        return Err(Error::config("scheme", format!("`{}` is not an offline scheme", cfg.scheme)));
    }
    let before = digest(&teacher);
    let mut state = RunState::new(cfg.clone(), data.train.len(), Some(teacher))?;
    run(&mut state, data, obs)?;
    let after = state.teacher.as_ref().map(|t| digest(&t.model));
    if after != Some(before) {
        return Err(Error::Model("teacher parameters changed during offline distillation".into()));
    }
    Ok(state)
}

/// Teacher and student trained simultaneously.
pub fn train_online<O: RunObserver>(cfg: &SchemeConfig, data: &TrainData<'_>, obs: &mut O) -> Result<RunState> {
    if !cfg.is_online() {
        return Err(Error::config("scheme", format!("`{}` is not an online scheme", cfg.scheme)));
    }
    let mut state = RunState::new(cfg.clone(), data.train.len(), None)?;
    run(&mut state, data, obs)?;
    Ok(state)
}
