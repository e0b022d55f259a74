//! The training command: epoch loop, metrics log and per-epoch checkpoints.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::synth::Dataset;
use crate::train::{EpochLog, Trainer};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.sgck";

/// Where a run writes its artifacts.
#[derive(Debug, Clone)]
pub struct Output {
    pub dir: PathBuf,
}

impl Output {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join(METRICS_FILE)
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join(CHECKPOINT_FILE)
    }

    fn append(&self, line: &str, truncate: bool) -> Result<()> {
        let path = self.metrics();
        let mut f = OpenOptions::new()
            .create(true)
            .write(true)
            .append(!truncate)
            .truncate(truncate)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
    }
}

/// Trains until `cfg.epochs` epochs are complete, resuming from `resume` when
/// given. Every epoch's log line goes to `emit` and, with an output directory,
/// to the metrics file next to a fresh checkpoint.
pub fn train(
    cfg: &RunConfig,
    data: &Dataset,
    out: Option<&Output>,
    resume: Option<&Path>,
    emit: &mut dyn FnMut(&EpochLog),
) -> Result<Trainer> {
    let mut trainer = match resume {
        Some(path) => Trainer::resume(Checkpoint::load(path)?, cfg, data)?,
        None => Trainer::new(cfg, data)?,
    };
    let mut fresh = resume.is_none();
    while trainer.epoch < cfg.epochs {
        let log = trainer.run_epoch(data)?;
        if let Some(o) = out {
            let line = serde_json::to_string(&log).map_err(|e| Error::Config(e.to_string()))?;
            o.append(&line, fresh)?;
            fresh = false;
            trainer.checkpoint().save(&o.checkpoint())?;
        }
        emit(&log);
    }
    Ok(trainer)
}
