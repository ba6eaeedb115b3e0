//! Plateau-driven learning-rate schedule and early stopping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub initial_lr: f64,
    /// Non-improving epochs after which the learning rate is halved.
    pub plateau_halve: usize,
    /// Non-improving epochs after which training stops.
    pub plateau_stop: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Length of the random training excerpts, in video frames.
    pub crop_frames: usize,
    pub grad_clip: f64,
    /// Dev examples scored after each epoch (0 = all of them).
    pub val_examples: usize,
    pub bn_momentum: f64,
    /// Threads used to assemble batches; results do not depend on it.
    pub workers: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            initial_lr: 1e-3,
            plateau_halve: 3,
            plateau_stop: 6,
            max_epochs: 100,
            batch_size: 4,
            seed: 0,
            crop_frames: 25,
            grad_clip: 5.0,
            val_examples: 0,
            bn_momentum: 0.1,
            workers: 1,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = self.initial_lr > 0.0
            && self.plateau_halve > 0
            && self.plateau_stop > 0
            && self.max_epochs > 0
            && self.batch_size > 0
            && self.crop_frames > 0
            && self.grad_clip >= 0.0
            && (0.0..=1.0).contains(&self.bn_momentum);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training schedule {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Plateau,
    MaxEpochs,
}

/// Tracks the best validation loss. An epoch improves only if its loss is
/// strictly below every earlier one; the stagnation counter resets on
/// improvement.
#[derive(Clone, Debug)]
pub struct PlateauTracker {
    lr: f64,
    best: f64,
    stagnant: usize,
    epoch: usize,
    halve_after: usize,
    stop_after: usize,
    max_epochs: usize,
}

impl PlateauTracker {
    pub fn new(schedule: &TrainSchedule) -> Self {
        Self {
            lr: schedule.initial_lr,
            best: f64::INFINITY,
            stagnant: 0,
            epoch: 0,
            halve_after: schedule.plateau_halve,
            stop_after: schedule.plateau_stop,
            max_epochs: schedule.max_epochs,
        }
    }

    /// Learning rate for the next epoch.
    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn epochs_seen(&self) -> usize {
        self.epoch
    }

    /// Records one epoch's validation loss. Returns whether it improved and
    /// whether training must stop now.
    pub fn observe(&mut self, val_loss: f64) -> (bool, Option<StopReason>) {
        self.epoch += 1;
        let improved = val_loss < self.best;
        if improved {
            self.best = val_loss;
            self.stagnant = 0;
        } else {
            self.stagnant += 1;
        }
        if self.stagnant >= self.stop_after {
            return (improved, Some(StopReason::Plateau));
        }
        if self.epoch >= self.max_epochs {
            return (improved, Some(StopReason::MaxEpochs));
        }
        if self.stagnant > 0 && self.stagnant % self.halve_after == 0 {
            self.lr *= 0.5;
        }
        (improved, None)
    }
}

/// Replays a dev-loss trace. Returns the learning rate of every epoch that
/// ran, and why and after which epoch training stopped (if it did).
pub fn replay(schedule: &TrainSchedule, dev_losses: &[f64]) -> (Vec<f64>, Option<(usize, StopReason)>) {
    let mut t = PlateauTracker::new(schedule);
    let mut lrs = Vec::new();
    for &v in dev_losses {
        lrs.push(t.lr());
        if let (_, Some(r)) = t.observe(v) {
            return (lrs, Some((t.epochs_seen(), r)));
        }
    }
    (lrs, None)
}
