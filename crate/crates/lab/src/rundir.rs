//! Self-describing run directories:
//!
//! ```text
//! <run>/config.toml          config echo (loadable with --config)
//! <run>/run.json             metadata: config as JSON, dataset, format version
//! <run>/metrics.jsonl        one JSON object per step and per epoch
//! <run>/checkpoints/last.json
//! <run>/checkpoints/<stage>-e<epoch>.json
//! <run>/summary.json         written by `evaluate`, read by `report`
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use simdis_core::config::SchemeConfig;
use simdis_core::trainer::{MetricsRecord, RecordKind, RunObserver, RunState, Stage};

use crate::checkpoint::save_checkpoint;
use crate::config_file::{load_config, write_config};
use crate::error::{io_err, LabError, Result};

pub const RUN_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub format_version: u32,
    pub name: String,
    pub dataset: String,
    pub train_examples: usize,
    pub config: SchemeConfig,
}

impl RunDir {
    /// Creates a fresh run directory; refuses to reuse one that has metrics.
    pub fn create(path: &Path, cfg: &SchemeConfig, train_examples: usize) -> Result<Self> {
        let dir = Self { path: path.to_path_buf() };
        if dir.metrics_path().exists() {
            return Err(LabError::Run(format!(
                "{} already holds a run; use `simdis resume --run {}` or choose another --name",
                path.display(),
                path.display()
            )));
        }
        fs::create_dir_all(dir.checkpoints_dir()).map_err(io_err(dir.checkpoints_dir()))?;
        write_config(cfg, &dir.config_path())?;
        let meta = RunMeta {
            format_version: RUN_FORMAT_VERSION,
            name: dir.name(),
            dataset: cfg.data.dataset.clone(),
            train_examples,
            config: cfg.clone(),
        };
        let text = serde_json::to_string_pretty(&meta).map_err(|e| LabError::Run(e.to_string()))?;
        fs::write(dir.path.join("run.json"), text).map_err(io_err(dir.path.join("run.json")))?;
        Ok(dir)
    }

    pub fn open(path: &Path) -> Result<Self> {
        let dir = Self { path: path.to_path_buf() };
        if !dir.config_path().exists() {
            return Err(LabError::Run(format!("{} is not a run directory (no config.toml)", path.display())));
        }
        Ok(dir)
    }

    pub fn name(&self) -> String {
        self.path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.path.display().to_string())
    }

    pub fn config_path(&self) -> PathBuf {
        self.path.join("config.toml")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.path.join("metrics.jsonl")
    }

    pub fn summary_path(&self) -> PathBuf {
        self.path.join("summary.json")
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.path.join("checkpoints")
    }

    pub fn last_checkpoint(&self) -> PathBuf {
        self.checkpoints_dir().join("last.json")
    }

    pub fn epoch_checkpoint(&self, stage: Stage, epoch: usize) -> PathBuf {
        self.checkpoints_dir().join(format!("{}-e{epoch:04}.json", stage_name(stage)))
    }

    pub fn config(&self) -> Result<SchemeConfig> {
        load_config(&self.config_path())
    }

    /// Epoch checkpoints in training order (teacher stage first).
    pub fn epoch_checkpoints(&self) -> Result<Vec<(Stage, usize, PathBuf)>> {
        let mut out = Vec::new();
        let dir = self.checkpoints_dir();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let p = entry.map_err(io_err(&dir))?.path();
            let Some(stem) = p.file_stem().and_then(|s| s.to_str()) else { continue };
            let Some((stage, e)) = stem.split_once("-e") else { continue };
            let (Some(stage), Ok(e)) = (parse_stage(stage), e.parse::<usize>()) else { continue };
            out.push((stage, e, p));
        }
        out.sort_by_key(|(s, e, _)| (stage_rank(*s), *e));
        Ok(out)
    }

    pub fn read_metrics(&self) -> Result<Vec<MetricsLine>> {
        let path = self.metrics_path();
        let f = File::open(&path).map_err(io_err(&path))?;
        let mut out = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(io_err(&path))?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| LabError::Parse {
                path: path.clone(),
                msg: e.to_string(),
            })?);
        }
        Ok(out)
    }

    pub fn read_summary(&self) -> Result<RunSummary> {
        let path = self.summary_path();
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| LabError::Parse { path, msg: e.to_string() })
    }

    pub fn write_summary(&self, s: &RunSummary) -> Result<()> {
        let path = self.summary_path();
        let text = serde_json::to_string_pretty(s).map_err(|e| LabError::Run(e.to_string()))?;
        fs::write(&path, text).map_err(io_err(&path))
    }
}

pub fn stage_name(s: Stage) -> &'static str {
    match s {
        Stage::Teacher => "teacher",
        Stage::Student => "student",
        Stage::Online => "online",
        Stage::Done => "done",
    }
}

fn parse_stage(s: &str) -> Option<Stage> {
    Some(match s {
        "teacher" => Stage::Teacher,
        "student" => Stage::Student,
        "online" => Stage::Online,
        _ => return None,
    })
}

fn stage_rank(s: Stage) -> u8 {
    match s {
        Stage::Teacher => 0,
        Stage::Online | Stage::Student => 1,
        Stage::Done => 2,
    }
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    #[serde(flatten)]
    pub record: MetricsRecord,
    pub wall_clock_s: f64,
}

/// Writes metrics and checkpoints as a run progresses. IO errors are held
/// until [`Recorder::finish`], since observer callbacks cannot fail.
pub struct Recorder {
    dir: RunDir,
    out: BufWriter<File>,
    lines: u64,
    start: Instant,
    checkpoint_every: usize,
    verbose: bool,
    error: Option<LabError>,
}

impl Recorder {
    pub fn new(dir: &RunDir, checkpoint_every: usize, verbose: bool) -> Result<Self> {
        let path = dir.metrics_path();
        let f = File::create(&path).map_err(io_err(&path))?;
        Ok(Self::with_file(dir, f, 0, checkpoint_every, verbose))
    }

    /// Reopens a run's metrics for appending after truncating them to the
    /// first `lines` records (those covered by the checkpoint).
    pub fn resume(dir: &RunDir, lines: u64, checkpoint_every: usize, verbose: bool) -> Result<Self> {
        let path = dir.metrics_path();
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let kept: String = text.lines().take(lines as usize).flat_map(|l| [l, "\n"]).collect();
        fs::write(&path, kept).map_err(io_err(&path))?;
        let f = OpenOptions::new().append(true).open(&path).map_err(io_err(&path))?;
        Ok(Self::with_file(dir, f, lines, checkpoint_every, verbose))
    }

    fn with_file(dir: &RunDir, f: File, lines: u64, checkpoint_every: usize, verbose: bool) -> Self {
        Self {
            dir: dir.clone(),
            out: BufWriter::new(f),
            lines,
            start: Instant::now(),
            checkpoint_every: checkpoint_every.max(1),
            verbose,
            error: None,
        }
    }

    fn keep<T>(&mut self, r: Result<T>) {
        if let Err(e) = r {
            self.error.get_or_insert(e);
        }
    }

    fn checkpoint(&mut self, path: &Path, state: &RunState) {
        let r = self.out.flush().map_err(io_err(self.dir.metrics_path()));
        self.keep(r);
        let r = save_checkpoint(path, state, self.lines);
        self.keep(r);
    }

    pub fn finish(mut self) -> Result<()> {
        let r = self.out.flush().map_err(io_err(self.dir.metrics_path()));
        self.keep(r);
        self.error.map_or(Ok(()), Err)
    }
}

impl RunObserver for Recorder {
    fn on_record(&mut self, record: &MetricsRecord) {
        let line = MetricsLine {
            record: record.clone(),
            wall_clock_s: self.start.elapsed().as_secs_f64(),
        };
        if self.verbose && record.kind == RecordKind::Epoch {
            eprintln!(
                "epoch {:>3} {:?} loss {:.4} (byol {:.4}, distill {:.4}) lr {:.5} tau {:.5}",
                record.epoch, record.role, record.loss.total, record.loss.byol_term, record.loss.distill_term, record.lr, record.tau
            );
        }
        let r = serde_json::to_string(&line)
            .map_err(|e| LabError::Run(e.to_string()))
            .and_then(|s| writeln!(self.out, "{s}").map_err(io_err(self.dir.metrics_path())));
        self.keep(r);
        self.lines += 1;
    }

    fn on_epoch_end(&mut self, state: &RunState) {
        let last = self.dir.last_checkpoint();
        self.checkpoint(&last, state);
        if state.epoch % self.checkpoint_every == 0 || state.epoch == state.cfg.epochs {
            let p = self.dir.epoch_checkpoint(state.stage, state.epoch);
            self.checkpoint(&p, state);
        }
    }

    fn on_divergence(&mut self, state: &RunState) {
        let p = self.dir.checkpoints_dir().join("diverged.json");
        self.checkpoint(&p, state);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Epochs of training behind the probed encoder.
    pub epoch: usize,
    pub top1: f64,
    pub top5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: String,
    pub scheme: String,
    /// Teaching views, e.g. `Shat_vp+That_vp`; `-` for teacher-only runs.
    pub views: String,
    pub num_views: usize,
    pub online: Option<bool>,
    pub epochs: usize,
    pub seed: u64,
    /// Which encoder the probe numbers refer to.
    pub probed: String,
    pub flops_formula: String,
    /// Decimal string; totals can exceed what JSON numbers hold exactly.
    pub flops_total: Option<String>,
    pub top1: f64,
    pub top5: f64,
    pub knn_top1: Option<f64>,
    pub teacher_top1: Option<f64>,
    pub curve: Vec<CurvePoint>,
}
