use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Stage;
use crate::error::{Error, Result};

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: u8,
    pub lr: f64,
    pub ce: f64,
    pub contrastive_mean: f64,
    pub total: f64,
    pub train_acc_noisy: f64,
    pub test_acc_live: f64,
    pub test_acc_ema: f64,
    pub selection_size: usize,
    pub selection_noise_rate: Option<f64>,
}

impl EpochRecord {
    pub fn stage(&self) -> Result<Stage> {
        Stage::from_number(self.stage)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub records: Vec<EpochRecord>,
}

impl RunMetrics {
    pub fn push(&mut self, record: EpochRecord) {
        self.records.push(record);
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn stage_records(&self, stage: Stage) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(move |r| r.stage == stage.number())
    }

    /// Epoch with the highest EMA test accuracy (earliest on ties).
    pub fn best(&self) -> Option<&EpochRecord> {
        self.records
            .iter()
            .fold(None, |best: Option<&EpochRecord>, r| match best {
                Some(b) if b.test_acc_ema >= r.test_acc_ema => Some(b),
                _ => Some(r),
            })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let ctx = || format!("writing {}", path.display());
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(ctx(), e.into()))?;
        if self.records.is_empty() {
            w.write_record(HEADER).map_err(|e| Error::io(ctx(), e.into()))?;
        }
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::io(ctx(), e.into()))?;
        }
        w.flush().map_err(|e| Error::io(ctx(), e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(format!("reading {}", path.display()), e.into()))?;
        let mut records = Vec::new();
        for (i, rec) in r.deserialize().enumerate() {
            records.push(rec.map_err(|e: csv::Error| Error::Parse {
                path: path.to_path_buf(),
                row: i + 2,
                message: e.to_string(),
            })?);
        }
        Ok(Self { records })
    }
}

pub const HEADER: [&str; 11] = [
    "epoch",
    "stage",
    "lr",
    "ce",
    "contrastive_mean",
    "total",
    "train_acc_noisy",
    "test_acc_live",
    "test_acc_ema",
    "selection_size",
    "selection_noise_rate",
];

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub group_hash: String,
    pub seed: u64,
    pub noise_kind: String,
    pub noise_rate: f64,
    /// `ce`, `stage1` or `stage1+2`.
    pub arm: String,
    pub epochs_completed: usize,
    pub final_test_acc_ema: f64,
    pub final_test_acc_live: f64,
    pub best_epoch: usize,
    pub best_test_acc_ema: f64,
    pub corpus_noise_rate: f64,
    pub final_selection_noise_rate: Option<f64>,
    pub code_version: String,
    pub config: serde_json::Value,
}

impl Summary {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::InvalidInput(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            row: e.line(),
            message: e.to_string(),
        })
    }
}
