//! Per-epoch training records, written as JSON lines.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PandError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Psc,
    Nsd,
}

/// One completed epoch. Loss fields are batch-size-weighted means over the
/// epoch's training batches; `top1` is measured on the held-out split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cls: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vis: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub txt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nsd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_nsd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_ms: Option<f64>,
}

impl EpochRecord {
    pub fn new(stage: Stage, epoch: usize, lr: f64) -> Self {
        Self {
            stage,
            epoch,
            lr,
            calibration: None,
            cls: None,
            vis: None,
            txt: None,
            nsd: None,
            base: None,
            total: None,
            lambda_nsd: None,
            top1: None,
            wall_clock_ms: None,
        }
    }
}

/// Append-only log, one record per completed epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    records: Vec<EpochRecord>,
}

impl MetricsLog {
    pub fn push(&mut self, record: EpochRecord) {
        self.records.push(record);
    }

    pub fn extend(&mut self, other: MetricsLog) {
        self.records.extend(other.records);
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn stage(&self, stage: Stage) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(move |r| r.stage == stage)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// JSON lines; wall-clock times only when `wall_clock` is set, so that
    /// reruns produce identical bytes by default.
    pub fn to_jsonl(&self, wall_clock: bool) -> String {
        let mut out = String::new();
        for r in &self.records {
            let mut r = r.clone();
            if !wall_clock {
                r.wall_clock_ms = None;
            }
            out.push_str(&serde_json::to_string(&r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>, wall_clock: bool) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl(wall_clock)).map_err(|e| PandError::io(path, e))
    }

    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l).map_err(|e| PandError::Format(format!("metrics line: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { records })
    }
}
