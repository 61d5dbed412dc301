use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Supervised plus contrastive, or supervised alone for the baseline.
    Joint,
    /// Contrastive only, on unlabeled target images.
    Pretrain,
    /// Supervised only, starting from the pretrained backbone.
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based within its phase.
    pub epoch: usize,
    pub phase: Phase,
    pub steps: usize,
    /// Mean unweighted supervised Dice loss over the epoch's steps.
    pub sup_loss: Option<f64>,
    /// Mean contrastive loss per domain.
    pub con_loss: BTreeMap<String, f64>,
    pub total_loss: f64,
    /// Validation mean Dice (%) across classes.
    pub val_dice: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Epoch (within the selecting phase) of the returned model.
    pub best_epoch: Option<usize>,
    pub best_val_dice: Option<f64>,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
}

impl TrainHistory {
    pub fn epochs(&self, phase: Phase) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(move |r| r.phase == phase)
    }

    /// One JSON object per epoch record.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| Error::format(path, e.to_string()))?;
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        f.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Vec<EpochRecord>> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?);
        }
        Ok(out)
    }
}
