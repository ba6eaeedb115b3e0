//! Losses, the learning-rate schedule and the training procedures of every
//! model variant, including the two decoupled pretraining strategies.

mod loops;
mod loss;
mod schedule;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use loops::{
    identity_accuracy, step1_partition, train_baseline, train_davse, train_spk_step1, train_spk_step2, train_sync,
    Step1Partition,
};
pub use loss::{ce_loss, ce_loss_grad, si_snr, si_snr_loss_grad, si_snr_with, Sample, SiSnrBreakdown, SiSnrOptions, SI_SNR_EPS};
pub use schedule::{replay, PlateauTracker, StopReason, TrainSchedule};

use crate::error::Result;
use crate::sepnet::ModelVariant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub epoch_time_s: f64,
}

/// Counts of what the training batches contained.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchAudit {
    pub batches: usize,
    pub examples: usize,
    /// Batches with at least one visual stream time-aligned with its target.
    pub aligned_visual_batches: usize,
    /// Batches with at least one mixture of two different speakers.
    pub cross_speaker_batches: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub variant: ModelVariant,
    pub procedure: String,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_reason: StopReason,
    pub steps: u64,
    pub audit: BatchAudit,
    /// Wall-clock duration of the whole procedure, including feature caching.
    pub wall_time_s: f64,
    pub checkpoint: Option<String>,
}

impl TrainLog {
    /// One JSON line per epoch followed by a summary line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for e in &self.epochs {
            let mut v = serde_json::to_value(e)?;
            v["kind"] = "epoch".into();
            s.push_str(&serde_json::to_string(&v)?);
            s.push('\n');
        }
        let summary = serde_json::json!({
            "kind": "summary",
            "variant": self.variant,
            "procedure": self.procedure,
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "stop_reason": self.stop_reason,
            "steps": self.steps,
            "audit": self.audit,
            "wall_time_s": self.wall_time_s,
            "checkpoint": self.checkpoint,
        });
        s.push_str(&serde_json::to_string(&summary)?);
        s.push('\n');
        Ok(s)
    }

    /// Aligned per-epoch table.
    pub fn to_table(&self) -> String {
        let mut s = format!("{} / {}\n{:>5}  {:>11}  {:>11}  {:>9}  {:>8}\n", self.variant, self.procedure, "epoch", "train_loss", "val_loss", "lr", "time_s");
        for e in &self.epochs {
            s.push_str(&format!(
                "{:>5}  {:>11.4}  {:>11.4}  {:>9.2e}  {:>8.1}\n",
                e.epoch, e.train_loss, e.val_loss, e.lr, e.epoch_time_s
            ));
        }
        s.push_str(&format!("stopped: {:?}, best epoch {}\n", self.stop_reason, self.best_epoch));
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    pub fn lr_sequence(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.lr).collect()
    }
}
