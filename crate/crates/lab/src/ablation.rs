//! The teaching-view grid: nine target sets, from BYOL alone to all seven
//! views, each trained online and (where a teacher is involved) offline
//! against one shared pretrained teacher.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use simdis_core::config::{DistillMode, Scheme, SchemeConfig, ViewTarget, ViewTargetSet};

use crate::commands::{evaluate, train, EvalOptions, TrainOptions};
use crate::error::{LabError, Result};
use crate::report::{emit_report, ReportFiles};

/// Rows of the grid. Every row keeps `Shat_vp`, the student's own BYOL target.
pub fn view_grid() -> Vec<ViewTargetSet> {
    use ViewTarget::*;
    let rows: [&[ViewTarget]; 9] = [
        &[ShatVp],
        &[ShatVp, TV],
        &[ShatVp, TVp],
        &[ShatVp, ThatV],
        &[ShatVp, ThatVp],
        &[ShatVp, TV, TVp],
        &[ShatVp, ThatV, ThatVp],
        &[ShatVp, TV, TVp, ThatV, ThatVp],
        &[SVp, ShatV, ShatVp, TV, TVp, ThatV, ThatVp],
    ];
    rows.iter()
        .map(|r| ViewTargetSet::from_targets(r).expect("grid rows have no duplicates"))
        .collect()
}

#[derive(Debug, Clone)]
pub struct AblationOptions {
    pub out: PathBuf,
    pub jobs: usize,
    /// Also run the offline column (trains one teacher first).
    pub offline: bool,
    pub verbose: bool,
}

/// One planned run of the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRun {
    pub name: String,
    pub cfg: SchemeConfig,
}

/// Configs for every cell. Offline cells read their teacher from
/// `teacher_checkpoint`.
pub fn plan(base: &SchemeConfig, teacher_checkpoint: Option<&Path>) -> Result<Vec<GridRun>> {
    let mut runs = Vec::new();
    for (i, targets) in view_grid().into_iter().enumerate() {
        let mut modes = vec![DistillMode::Online];
        if let (true, Some(_)) = (targets.needs_teacher(), teacher_checkpoint) {
            modes.push(DistillMode::Offline);
        }
        for mode in modes {
            let cfg = SchemeConfig {
                scheme: Scheme::Custom,
                view_targets: Some(targets),
                distill_mode: mode,
                pretrain_teacher: false,
                teacher_checkpoint: match mode {
                    DistillMode::Offline => teacher_checkpoint.map(|p| p.display().to_string()),
                    DistillMode::Online => None,
                },
                ..base.clone()
            }
            .validated()?;
            let tag = match mode {
                DistillMode::Online => "on",
                DistillMode::Offline => "off",
            };
            runs.push(GridRun {
                name: format!("row{}-{tag}", i + 1),
                cfg,
            });
        }
    }
    Ok(runs)
}

/// Runs `f` over `items` on up to `jobs` threads, keeping result order.
pub fn run_parallel<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<R>>> = Mutex::new(items.iter().map(|_| None).collect());
    thread::scope(|s| {
        for _ in 0..jobs.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = f(item);
                results.lock().expect("no worker panics while holding the lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|r| r.expect("every item was processed"))
        .collect()
}

/// Trains and evaluates the whole grid under `opts.out`, then writes the
/// report there.
pub fn ablate_views(base: &SchemeConfig, opts: &AblationOptions) -> Result<ReportFiles> {
    let train_opts = TrainOptions {
        verbose: opts.verbose,
        ..TrainOptions::new(&opts.out)
    };
    let teacher = if opts.offline {
        let cfg = SchemeConfig {
            scheme: Scheme::TeacherOnly,
            view_targets: None,
            teacher_checkpoint: None,
            pretrain_teacher: false,
            ..base.clone()
        }
        .validated()?;
        let dir = train(
            &cfg,
            &TrainOptions {
                name: Some("teacher".into()),
                ..train_opts.clone()
            },
        )?;
        Some(dir.last_checkpoint())
    } else {
        None
    };
    let runs = plan(base, teacher.as_deref())?;
    let outcomes = run_parallel(&runs, opts.jobs, |r| -> Result<PathBuf> {
        let dir = train(
            &r.cfg,
            &TrainOptions {
                name: Some(r.name.clone()),
                ..train_opts.clone()
            },
        )?;
        evaluate(&dir.path, EvalOptions { curve: false, knn: false })?;
        Ok(dir.path)
    });
    let mut dirs = Vec::new();
    let mut failed = Vec::new();
    for (r, o) in runs.iter().zip(outcomes) {
        match o {
            Ok(p) => dirs.push(p),
            Err(e) => failed.push(format!("{}: {e}", r.name)),
        }
    }
    if !failed.is_empty() {
        return Err(LabError::Run(format!("grid runs failed:\n  {}", failed.join("\n  "))));
    }
    emit_report(&dirs, &opts.out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_sizes_match_view_counts() {
        let counts: Vec<usize> = view_grid().iter().map(|s| s.len()).collect();
        assert_eq!(counts, [1, 2, 2, 2, 2, 3, 3, 5, 7]);
        assert!(view_grid().iter().all(|s| s.contains(ViewTarget::ShatVp)));
    }

    #[test]
    fn plan_skips_offline_for_byol_row() {
        let base = SchemeConfig::default();
        let runs = plan(&base, Some(Path::new("t.json"))).unwrap();
        assert_eq!(runs.len(), 17);
        assert_eq!(runs[0].name, "row1-on");
        assert_eq!(runs[1].name, "row2-on");
        assert_eq!(runs[2].name, "row2-off");
        assert_eq!(plan(&base, None).unwrap().len(), 9);
    }

    #[test]
    fn parallel_keeps_order() {
        let v: Vec<u32> = (0..20).collect();
        assert_eq!(run_parallel(&v, 4, |x| x * 2), v.iter().map(|x| x * 2).collect::<Vec<_>>());
    }
}
