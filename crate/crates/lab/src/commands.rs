//! The operations behind each CLI subcommand.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use simdis_core::accounting::{extra_head_flops, measure_forward_flops, scheme_cost, scheme_formula, CostModel};
use simdis_core::config::{DistillMode, Scheme, SchemeConfig, ViewTarget};
use simdis_core::data::{ImageDataset, Normalization, Split};
use simdis_core::eval::{extract_features, knn_probe, linear_probe};
use simdis_core::models::{build_student, build_teacher, SiameseModel};
use simdis_core::trainer::{self, ModelState, RunState, Stage, TrainData};

use crate::checkpoint::{load_checkpoint, load_teacher};
use crate::dataset_io::load_split;
use crate::error::{LabError, Result};
use crate::rundir::{CurvePoint, Recorder, RunDir, RunSummary};

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub run_root: PathBuf,
    pub name: Option<String>,
    /// Overrides `teacher_checkpoint` from the config.
    pub teacher: Option<PathBuf>,
    pub checkpoint_every: usize,
    pub verbose: bool,
}

impl TrainOptions {
    pub fn new(run_root: impl Into<PathBuf>) -> Self {
        Self {
            run_root: run_root.into(),
            name: None,
            teacher: None,
            checkpoint_every: 1,
            verbose: false,
        }
    }
}

/// Train split of the configured dataset, checked against the config, and
/// its per-channel normalization.
pub fn load_train_data(cfg: &SchemeConfig) -> Result<(ImageDataset, Normalization)> {
    let train = load_split(Path::new(&cfg.data.dataset), Split::Train)?;
    check_dataset(cfg, &train)?;
    let norm = train.channel_stats();
    Ok((train, norm))
}

fn check_dataset(cfg: &SchemeConfig, d: &ImageDataset) -> Result<()> {
    let s = &d.spec;
    let want = (cfg.data.channels, cfg.data.image_size, cfg.data.image_size, cfg.data.num_classes);
    let got = (s.channels, s.height, s.width, s.num_classes);
    if want != got {
        return Err(LabError::Run(format!(
            "dataset {} has channels/height/width/classes {got:?} but the config expects {want:?}",
            cfg.data.dataset
        )));
    }
    Ok(())
}

pub fn default_run_name(cfg: &SchemeConfig) -> String {
    match cfg.scheme {
        Scheme::Custom => format!(
            "custom-{}-{}-seed{}",
            match cfg.distill_mode {
                DistillMode::Online => "on",
                DistillMode::Offline => "off",
            },
            cfg.targets().label(),
            cfg.seed
        ),
        s => format!("{s}-seed{}", cfg.seed),
    }
}

/// Starts a new run of `cfg` and trains it to completion.
pub fn train(cfg: &SchemeConfig, opts: &TrainOptions) -> Result<RunDir> {
    let (train, norm) = load_train_data(cfg)?;
    let teacher_path = opts
        .teacher
        .clone()
        .or_else(|| cfg.teacher_checkpoint.as_ref().map(PathBuf::from));
    let mut cfg = cfg.clone();
    let teacher = match teacher_path {
        Some(p) if cfg.is_offline() => {
            cfg.teacher_checkpoint = Some(p.display().to_string());
            Some(load_teacher(&p)?)
        }
        _ => None,
    };
    let name = opts.name.clone().unwrap_or_else(|| default_run_name(&cfg));
    let dir = RunDir::create(&opts.run_root.join(name), &cfg, train.len())?;
    let mut rec = Recorder::new(&dir, opts.checkpoint_every, opts.verbose)?;
    let mut state = RunState::new(cfg, train.len(), teacher)?;
    let outcome = trainer::run(&mut state, &TrainData { train: &train, norm: &norm }, &mut rec);
    rec.finish()?;
    outcome?;
    Ok(dir)
}

/// Continues a run from its last epoch-boundary checkpoint.
pub fn resume(run: &Path, verbose: bool) -> Result<RunDir> {
    let dir = RunDir::open(run)?;
    let last = dir.last_checkpoint();
    if !last.exists() {
        return Err(LabError::Run(format!(
            "{} has no checkpoint yet; start the run again instead",
            run.display()
        )));
    }
    let ck = load_checkpoint(&last)?;
    let mut state = ck.state;
    let (train, norm) = load_train_data(&state.cfg)?;
    let mut rec = Recorder::resume(&dir, ck.metrics_lines, 1, verbose)?;
    let outcome = trainer::run(&mut state, &TrainData { train: &train, norm: &norm }, &mut rec);
    rec.finish()?;
    outcome?;
    Ok(dir)
}

/// The model a run is judged by: the student when there is one.
fn probed(state: &RunState) -> Result<(&'static str, &ModelState)> {
    match (&state.student, &state.teacher) {
        (Some(s), _) => Ok(("student", s)),
        (None, Some(t)) => Ok(("teacher", t)),
        _ => Err(LabError::Run("checkpoint holds no model".into())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    /// Probe every stored epoch checkpoint, not just the last one.
    pub curve: bool,
    pub knn: bool,
}

/// Linear (and optionally kNN) probes of a run, saved to `summary.json`.
pub fn evaluate(run: &Path, opts: EvalOptions) -> Result<RunSummary> {
    let dir = RunDir::open(run)?;
    let ck = load_checkpoint(&dir.last_checkpoint())?;
    let state = &ck.state;
    let cfg = &state.cfg;
    let (train, norm) = load_train_data(cfg)?;
    let eval = load_split(Path::new(&cfg.data.dataset), Split::Eval)?;
    check_dataset(cfg, &eval)?;

    let (role, ms) = probed(state)?;
    let enc = &ms.model.online.encoder;
    let result = linear_probe(enc, &train, &eval, &norm, &cfg.probe, cfg.seed)?;
    let knn_top1 = if opts.knn {
        let g = extract_features(enc, &train, &norm, cfg.probe.batch_size)?;
        let q = extract_features(enc, &eval, &norm, cfg.probe.batch_size)?;
        Some(knn_probe(&g, &train.labels, &q, &eval.labels, train.spec.num_classes, cfg.probe.knn_k)?)
    } else {
        None
    };
    let teacher_top1 = match (&state.student, &state.teacher) {
        (Some(_), Some(t)) => Some(linear_probe(&t.model.online.encoder, &train, &eval, &norm, &cfg.probe, cfg.seed)?.top1),
        _ => None,
    };

    let mut curve = Vec::new();
    if opts.curve {
        let wanted = |s: Stage| if role == "student" { s != Stage::Teacher } else { s == Stage::Teacher };
        for (stage, epoch, path) in dir.epoch_checkpoints()? {
            if !wanted(stage) {
                continue;
            }
            let st = load_checkpoint(&path)?.state;
            let (_, m) = probed(&st)?;
            let r = linear_probe(&m.model.online.encoder, &train, &eval, &norm, &cfg.probe, cfg.seed)?;
            curve.push(CurvePoint {
                epoch,
                top1: r.top1,
                top5: r.top5,
            });
        }
    }

    let cost = cost_model(cfg, state, &train)?;
    let (formula, total) = run_cost(cfg, &cost);
    let summary = RunSummary {
        run: dir.name(),
        scheme: cfg.scheme.to_string(),
        views: if cfg.trains_student() { views_label(cfg) } else { "-".into() },
        num_views: if cfg.trains_student() { with_byol_target(cfg).len() } else { 0 },
        online: if cfg.is_online() {
            Some(true)
        } else if cfg.is_offline() {
            Some(false)
        } else {
            None
        },
        epochs: cfg.epochs,
        seed: cfg.seed,
        probed: role.into(),
        flops_formula: formula,
        flops_total: Some(total.to_string()),
        top1: result.top1,
        top5: result.top5,
        knn_top1,
        teacher_top1,
        curve,
    };
    dir.write_summary(&summary)?;
    Ok(summary)
}

fn with_byol_target(cfg: &SchemeConfig) -> simdis_core::config::ViewTargetSet {
    let mut t = cfg.targets();
    t.insert(ViewTarget::ShatVp);
    t
}

/// Teaching views including the implicit BYOL target, as Table 2 lists them.
pub fn views_label(cfg: &SchemeConfig) -> String {
    with_byol_target(cfg).label()
}

fn forward_flops(model: &SiameseModel, cfg: &SchemeConfig) -> Result<u64> {
    Ok(measure_forward_flops(model, [cfg.data.channels, cfg.data.image_size, cfg.data.image_size])?)
}

/// Per-image forward costs of the configured models, with `M` the training
/// set size and `N` the epoch count.
pub fn cost_model(cfg: &SchemeConfig, state: &RunState, train: &ImageDataset) -> Result<CostModel> {
    let c_t = match &state.teacher {
        Some(t) => forward_flops(&t.model, cfg)?,
        None => forward_flops(&build_teacher(cfg, 1)?, cfg)?,
    };
    let c_s = match &state.student {
        Some(s) => forward_flops(&s.model, cfg)?,
        None => forward_flops(&build_student(&student_cfg(cfg), 1)?, cfg)?,
    };
    Ok(CostModel {
        c_t,
        c_s,
        c_heads: extra_head_flops(cfg.model.proj_dim, cfg.targets().distilled().len()),
        m: train.len() as u64,
        n: cfg.epochs as u64,
    })
}

/// A config that builds a single-target distilling student, for costing
/// runs that have no student of their own.
fn student_cfg(cfg: &SchemeConfig) -> SchemeConfig {
    SchemeConfig {
        scheme: Scheme::SimdisOn,
        view_targets: Some(simdis_core::config::ViewTargetSet::single(ViewTarget::ThatVp)),
        ..cfg.clone()
    }
}

/// Cost formula and total for any run. Named distillation schemes use the
/// Table 1 formulas; other runs fall back to the closest structure.
pub fn run_cost(cfg: &SchemeConfig, c: &CostModel) -> (String, u128) {
    let mn = c.m as u128 * c.n as u128;
    let named = match cfg.scheme {
        Scheme::SimdisOff | Scheme::SimdisOn | Scheme::SimdisOn7v => Some(cfg.scheme),
        Scheme::Custom if cfg.is_offline() => Some(Scheme::SimdisOff),
        Scheme::Custom if cfg.is_online() => Some(if cfg.targets().distilled().len() > 1 {
            Scheme::SimdisOn7v
        } else {
            Scheme::SimdisOn
        }),
        _ => None,
    };
    match named {
        Some(s) => (
            scheme_formula(s).unwrap_or("?").to_string(),
            scheme_cost(c, s).unwrap_or_default(),
        ),
        None if cfg.scheme == Scheme::TeacherOnly => ("c_T M N".into(), c.c_t as u128 * mn),
        None => ("c_S M N".into(), c.c_s as u128 * mn),
    }
}

fn giga(x: u128) -> String {
    format!("{:.4}G", x as f64 / 1e9)
}

/// Table-1-shaped cost report for the configured teacher and student.
pub fn flops_report(cfg: &SchemeConfig, m: u64, n: u64) -> Result<String> {
    let teacher = build_teacher(cfg, 1)?;
    let student = build_student(&SchemeConfig { scheme: Scheme::SimdisOn7v, view_targets: None, ..cfg.clone() }.validated()?, 1)?;
    let c = CostModel {
        c_t: forward_flops(&teacher, cfg)?,
        c_s: forward_flops(&student, cfg)?,
        c_heads: extra_head_flops(cfg.model.proj_dim, simdis_core::config::ViewTargetSet::full().distilled().len()),
        m,
        n,
    };
    let mut out = String::new();
    let _ = writeln!(
        out,
        "teacher {}  c_T = {} FLOPs\nstudent {}  c_S = {} FLOPs\nmulti-view heads c_heads = {} FLOPs\nM = {m}, N = {n}, input {}x{}x{}\n",
        cfg.model.teacher_encoder,
        c.c_t,
        cfg.model.student_encoder,
        c.c_s,
        c.c_heads,
        cfg.data.channels,
        cfg.data.image_size,
        cfg.data.image_size
    );
    let _ = writeln!(out, "{:<14} {:<28} {:>16} {:>14}", "Method", "FLOPs", "per image", "total");
    for s in [Scheme::SimdisOff, Scheme::SimdisOn, Scheme::SimdisOn7v] {
        let total = scheme_cost(&c, s)?;
        let per_image = if m == 0 || n == 0 { 0 } else { total / (m as u128 * n as u128) };
        let _ = writeln!(
            out,
            "{:<14} {:<28} {:>16} {:>14}",
            s.as_str(),
            scheme_formula(s)?,
            per_image,
            giga(total)
        );
    }
    Ok(out)
}
