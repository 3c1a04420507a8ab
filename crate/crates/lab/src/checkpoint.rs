//! Versioned JSON checkpoints of a whole [`RunState`]: all four branches,
//! τ-schedule steps, optimizer state and the config echo.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use simdis_core::models::SiameseModel;
use simdis_core::trainer::RunState;

use crate::error::{io_err, LabError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Lines in `metrics.jsonl` when the checkpoint was taken.
    pub metrics_lines: u64,
    pub state: RunState,
}

pub fn save_checkpoint(path: &Path, state: &RunState, metrics_lines: u64) -> Result<()> {
    let ck = Checkpoint {
        version: CHECKPOINT_VERSION,
        metrics_lines,
        state: state.clone(),
    };
    let text = serde_json::to_string(&ck).map_err(|e| LabError::Run(format!("cannot serialize checkpoint: {e}")))?;
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, text).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| LabError::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(LabError::Parse {
            path: path.to_path_buf(),
            msg: format!("checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})", ck.version),
        });
    }
    Ok(ck)
}

/// The teacher stored in a checkpoint, for offline distillation.
pub fn load_teacher(path: &Path) -> Result<SiameseModel> {
    let ck = load_checkpoint(path)?;
    ck.state.teacher.map(|t| t.model).ok_or_else(|| LabError::Parse {
        path: path.to_path_buf(),
        msg: "checkpoint holds no teacher".into(),
    })
}
