//! Per-epoch checkpoints, the best-so-far checkpoint and the history file.

use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use super::EpochStats;
use crate::model::{save_checkpoint, DetectorModel, ModelError};

pub const HISTORY_FILE: &str = "history.jsonl";
pub const RUN_MANIFEST_FILE: &str = "run-manifest.json";
pub const BEST_CHECKPOINT: &str = "ckpt-best.json";

pub fn epoch_checkpoint_name(epoch: u32) -> String {
    format!("ckpt-epoch{epoch}.json")
}

#[derive(Debug)]
pub struct CheckpointWriter {
    dir: PathBuf,
    keep_last: usize,
    kept: Vec<u32>,
    best: Option<(f64, u32)>,
}

impl CheckpointWriter {
    /// `keep_last == 0` keeps every epoch checkpoint.
    pub fn new(dir: impl Into<PathBuf>, keep_last: usize) -> Self {
        Self {
            dir: dir.into(),
            keep_last,
            kept: Vec::new(),
            best: None,
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn best_epoch(&self) -> Option<u32> {
        self.best.map(|b| b.1)
    }

    pub fn write_run_manifest<T: serde::Serialize>(&self, manifest: &T) -> io::Result<()> {
        fs::create_dir_all(&self.dir)?;
        let mut bytes = serde_json::to_vec_pretty(manifest)?;
        bytes.push(b'\n');
        fs::write(self.dir.join(RUN_MANIFEST_FILE), bytes)?;
        // history from an earlier run in the same directory would interleave
        match fs::remove_file(self.dir.join(HISTORY_FILE)) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e),
            _ => Ok(()),
        }
    }

    /// Persist the end-of-epoch state. Best is chosen by validation accuracy
    /// when available, otherwise by lowest mean training loss; ties keep the
    /// earlier epoch.
    pub fn record_epoch(
        &mut self,
        model: &DetectorModel,
        stats: &EpochStats,
    ) -> Result<(), ModelError> {
        fs::create_dir_all(&self.dir)?;
        save_checkpoint(model, &self.dir.join(epoch_checkpoint_name(stats.epoch)))?;
        self.kept.push(stats.epoch);
        if self.keep_last > 0 {
            while self.kept.len() > self.keep_last {
                let old = self.kept.remove(0);
                let path = self.dir.join(epoch_checkpoint_name(old));
                if path.exists() {
                    fs::remove_file(path)?;
                }
            }
        }

        let score = stats.val_accuracy.unwrap_or(-stats.mean_loss);
        if self.best.is_none_or(|(b, _)| score > b) {
            self.best = Some((score, stats.epoch));
            save_checkpoint(model, &self.dir.join(BEST_CHECKPOINT))?;
        }

        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.dir.join(HISTORY_FILE))?;
        let mut line = serde_json::to_vec(stats)?;
        line.push(b'\n');
        f.write_all(&line)?;
        Ok(())
    }
}
