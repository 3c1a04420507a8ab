//! Argument parsing and dispatch for the `simdis` binary.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use simdis_core::config::{DistillMode, Scheme, SchemeConfig};

use crate::ablation::{ablate_views, AblationOptions};
use crate::commands::{evaluate, flops_report, load_train_data, resume, train, EvalOptions, TrainOptions};
use crate::config_file::{load_config_raw, output_root};
use crate::dataset_io::{fetch_shapes, import_cifar10, ShapesRequest};
use crate::error::{LabError, Result};
use crate::report::emit_report;

#[derive(Debug, Parser)]
#[command(name = "simdis", version, about = "Self-supervised distillation experiments at toy scale")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Source {
    /// Procedurally rendered shapes.
    Shapes,
    /// Convert a local copy of the CIFAR-10 binary release.
    Cifar10,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML config file; defaults apply to every field it omits.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Scheme override, e.g. simdis_on_7v or custom.
    #[arg(long)]
    pub scheme: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset directory override.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Parent directory for run directories (default: $SIMDIS_RUN_DIR or runs).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run directory name (default derived from scheme and seed).
    #[arg(long)]
    pub name: Option<String>,
    /// Keep an epoch checkpoint every this many epochs.
    #[arg(long, default_value_t = 1)]
    pub checkpoint_every: usize,
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a dataset directory (synthetic shapes or converted CIFAR-10).
    FetchData {
        #[arg(long, default_value = "data/shapes")]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Source::Shapes)]
        source: Source,
        /// Directory holding the CIFAR-10 binary batches.
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long, default_value_t = 2048)]
        train: usize,
        #[arg(long, default_value_t = 1000)]
        eval: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a teacher alone with BYOL.
    TrainTeacher(RunArgs),
    /// Train teacher and student together.
    TrainOnline(RunArgs),
    /// Train a student against a frozen teacher.
    DistillOffline {
        #[command(flatten)]
        run: RunArgs,
        /// Teacher checkpoint (a run's checkpoints/last.json).
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Continue an interrupted run from its last checkpoint.
    Resume {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Linear-probe a run and write its summary.json.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        /// Only probe the final checkpoint.
        #[arg(long)]
        no_curve: bool,
        /// Also report kNN top-1.
        #[arg(long)]
        knn: bool,
    },
    /// Print the training-cost table for the configured models.
    Flops {
        #[command(flatten)]
        config: ConfigArgs,
        /// Training-set size M (default: the dataset's train split).
        #[arg(long)]
        m: Option<u64>,
        /// Write the table here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tables and plots from evaluated run directories.
    Report {
        #[arg(long, default_value = "report")]
        out: PathBuf,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Train and evaluate the teaching-view grid.
    AblateViews {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "runs/ablation")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Skip the offline column and its teacher.
        #[arg(long)]
        online_only: bool,
        #[arg(long, short)]
        quiet: bool,
    },
}

fn parse_scheme(s: &str) -> Result<Scheme> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| LabError::Run(format!("unknown scheme `{s}`")))
}

/// Config file plus overrides, not yet validated. `fallback` is the scheme
/// used when neither the file nor the flags pick one.
fn raw_config(a: &ConfigArgs, fallback: Scheme) -> Result<SchemeConfig> {
    let mut cfg = match &a.config {
        Some(p) => load_config_raw(p)?,
        None => SchemeConfig {
            scheme: fallback,
            ..SchemeConfig::default()
        },
    };
    if let Some(s) = &a.scheme {
        let s = parse_scheme(s)?;
        if s != cfg.scheme && s != Scheme::Custom {
            cfg.view_targets = None;
        }
        cfg.scheme = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(d) = &a.dataset {
        cfg.data.dataset = d.display().to_string();
    }
    Ok(cfg)
}

fn train_opts(a: &RunArgs) -> TrainOptions {
    TrainOptions {
        run_root: output_root(a.out.as_deref()),
        name: a.name.clone(),
        teacher: None,
        checkpoint_every: a.checkpoint_every,
        verbose: !a.quiet,
    }
}

fn done(dir: &Path) {
    println!("run directory: {}", dir.display());
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::FetchData {
            out,
            source,
            from,
            train,
            eval,
            size,
            channels,
            classes,
            seed,
        } => {
            let m = match source {
                Source::Shapes => fetch_shapes(
                    &out,
                    ShapesRequest {
                        train,
                        eval,
                        size,
                        channels,
                        classes,
                        seed,
                    },
                )?,
                Source::Cifar10 => {
                    let from = from.ok_or_else(|| LabError::Run("--source cifar10 needs --from <cifar-10-batches-bin>".into()))?;
                    import_cifar10(&from, &out)?
                }
            };
            println!(
                "wrote {} ({} train / {} eval, {}x{}x{}, {} classes)",
                out.display(),
                m.train.count,
                m.eval.count,
                m.channels,
                m.height,
                m.width,
                m.classes.len()
            );
        }
        Command::TrainTeacher(a) => {
            let mut cfg = raw_config(&a.config, Scheme::TeacherOnly)?;
            cfg.scheme = Scheme::TeacherOnly;
            cfg.view_targets = None;
            done(&train(&cfg.validated()?, &train_opts(&a))?.path);
        }
        Command::TrainOnline(a) => {
            let cfg = raw_config(&a.config, Scheme::SimdisOn)?.validated()?;
            if cfg.is_offline() || cfg.scheme == Scheme::TeacherOnly {
                return Err(LabError::Run(format!(
                    "scheme `{}` is not an online scheme; use train-teacher or distill-offline",
                    cfg.scheme
                )));
            }
            done(&train(&cfg, &train_opts(&a))?.path);
        }
        Command::DistillOffline { run, teacher } => {
            let mut cfg = raw_config(&run.config, Scheme::SimdisOff)?;
            if let Some(t) = &teacher {
                cfg.teacher_checkpoint = Some(t.display().to_string());
            }
            let cfg = cfg.validated()?;
            if !cfg.is_offline() {
                return Err(LabError::Run(format!(
                    "scheme `{}`{} is not an offline scheme",
                    cfg.scheme,
                    if cfg.scheme == Scheme::Custom && cfg.distill_mode == DistillMode::Online {
                        " with distill_mode = online"
                    } else {
                        ""
                    }
                )));
            }
            done(&train(&cfg, &TrainOptions { teacher, ..train_opts(&run) })?.path);
        }
        Command::Resume { run, quiet } => done(&resume(&run, !quiet)?.path),
        Command::Evaluate { run, no_curve, knn } => {
            let s = evaluate(&run, EvalOptions { curve: !no_curve, knn })?;
            println!(
                "{}: {} top-1 {:.2} top-5 {:.2}{}",
                s.run,
                s.probed,
                s.top1,
                s.top5,
                s.knn_top1.map(|k| format!(" kNN top-1 {k:.2}")).unwrap_or_default()
            );
        }
        Command::Flops { config, m, out } => {
            let cfg = raw_config(&config, Scheme::SimdisOn7v)?.validated()?;
            let m = match m {
                Some(m) => m,
                None => load_train_data(&cfg)?.0.len() as u64,
            };
            let text = flops_report(&cfg, m, cfg.epochs as u64)?;
            print!("{text}");
            if let Some(p) = out {
                std::fs::write(&p, &text).map_err(crate::error::io_err(&p))?;
            }
        }
        Command::Report { out, runs } => {
            let files = emit_report(&runs, &out)?;
            println!("wrote {}", files.summary_csv.display());
            println!("wrote {}", files.budget_table.display());
            if let Some(v) = &files.views_table {
                println!("wrote {}", v.display());
            }
            for p in &files.plots {
                println!("wrote {}", p.display());
            }
        }
        Command::AblateViews {
            config,
            out,
            jobs,
            online_only,
            quiet,
        } => {
            let mut base = raw_config(&config, Scheme::Custom)?;
            base.scheme = Scheme::TeacherOnly;
            base.view_targets = None;
            let base = base.validated()?;
            let files = ablate_views(
                &base,
                &AblationOptions {
                    out,
                    jobs,
                    offline: !online_only,
                    verbose: !quiet,
                },
            )?;
            if let Some(v) = &files.views_table {
                print!("{}", std::fs::read_to_string(v).map_err(crate::error::io_err(v))?);
            }
        }
    }
    Ok(())
}

/// Parses `argv` (program name first) and runs the subcommand. Returns the
/// process exit code: 0 on success, 2 for usage errors, 1 otherwise.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
