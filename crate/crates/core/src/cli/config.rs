//! JSON run configuration: one file drives a full reproduction.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::avcorpus::{CorpusConfig, VisualField};
use crate::error::{Error, Result};
use crate::mixsim::DatasetVariant;
use crate::sepnet::{ModelConfig, ModelVariant, TcnConfig};
use crate::trainkit::TrainSchedule;

/// Mixture simulation. The SIR range is fixed and deliberately not a key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub seed: u64,
    pub train_pairs: usize,
    pub dev_pairs: usize,
    pub test_pairs: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self { seed: 11, train_pairs: 400, dev_pairs: 40, test_pairs: 100 }
    }
}

/// Model hyper-parameters shared by all variants; rates and resolution come
/// from the corpus section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Parameter-initialization seed.
    pub seed: u64,
    pub n_audio_filters: usize,
    pub audio_kernel: usize,
    pub audio_stride: usize,
    pub visual_dim: usize,
    pub tcn: TcnConfig,
    pub visual_field: VisualField,
    pub visual_temporal_kernel: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            seed: 0,
            n_audio_filters: m.n_audio_filters,
            audio_kernel: m.audio_kernel,
            audio_stride: m.audio_stride,
            visual_dim: m.visual_dim,
            tcn: m.tcn,
            visual_field: m.visual_field,
            visual_temporal_kernel: m.visual_temporal_kernel,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, variant: ModelVariant, field: Option<VisualField>, corpus: &CorpusConfig) -> ModelConfig {
        ModelConfig {
            variant,
            n_audio_filters: self.n_audio_filters,
            audio_kernel: self.audio_kernel,
            audio_stride: self.audio_stride,
            visual_dim: self.visual_dim,
            tcn: self.tcn.clone(),
            visual_field: field.unwrap_or(self.visual_field),
            sample_rate: corpus.sample_rate,
            fps: corpus.fps,
            resolution: corpus.resolution,
            visual_temporal_kernel: self.visual_temporal_kernel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Schedule for the separation procedures.
    pub schedule: TrainSchedule,
    /// Epoch cap for spk step 1 (identity classification).
    pub step1_max_epochs: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { schedule: TrainSchedule { max_epochs: 8, val_examples: 40, ..TrainSchedule::default() }, step1_max_epochs: 20 }
    }
}

impl TrainSection {
    pub fn step1_schedule(&self) -> TrainSchedule {
        TrainSchedule { max_epochs: self.step1_max_epochs, ..self.schedule.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub datasets: Vec<DatasetVariant>,
    /// External PESQ scorer, see `evalkit::PesqAdapter`.
    pub pesq_cmd: Option<String>,
    /// Score only the first n test examples (0 = all).
    pub max_examples: usize,
    pub embed_speakers: usize,
    pub embed_seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            datasets: vec![DatasetVariant::Dsav, DatasetVariant::Dssv, DatasetVariant::Ssav],
            pesq_cmd: None,
            max_examples: 0,
            embed_speakers: 9,
            embed_seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub simulate: SimulateSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Desk defaults: nine test speakers so the embedding study has its full
    /// speaker set.
    pub fn desk() -> Self {
        Self { corpus: CorpusConfig { test_speakers: 9, ..CorpusConfig::default() }, ..Self::default() }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        for v in ModelVariant::ALL {
            self.model.model_config(v, None, &self.corpus).validate()?;
        }
        self.train.schedule.validate()?;
        self.train.step1_schedule().validate()?;
        let s = &self.simulate;
        if s.train_pairs == 0 || s.dev_pairs == 0 || s.test_pairs == 0 {
            return Err(Error::Config("simulate pair counts must be positive".into()));
        }
        if self.eval.datasets.is_empty() {
            return Err(Error::Config("eval.datasets must not be empty".into()));
        }
        Ok(())
    }

    /// Digest of the canonical JSON form.
    pub fn digest(&self) -> Result<String> {
        Ok(crate::avcorpus::hex_digest(serde_json::to_string(self)?.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        for cfg in [RunConfig::default(), RunConfig::desk()] {
            cfg.validate().unwrap();
            assert_eq!(RunConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
        }
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
        let partial = RunConfig::from_json(r#"{"simulate": {"train_pairs": 7}, "train": {"schedule": {"max_epochs": 3}}}"#).unwrap();
        assert_eq!(partial.simulate.train_pairs, 7);
        assert_eq!(partial.simulate.dev_pairs, 40);
        assert_eq!(partial.train.schedule.max_epochs, 3);
        assert_eq!(partial.train.schedule.initial_lr, 1e-3);
    }

    #[test]
    fn unknown_keys_and_sir_overrides_are_rejected() {
        for bad in [
            r#"{"bogus": 1}"#,
            r#"{"simulate": {"sir_range": [0, 20]}}"#,
            r#"{"simulate": {"sir_min_db": -20}}"#,
            r#"{"train": {"schedule": {"lr": 0.1}}}"#,
            r#"{"model": {"variant": "spk"}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for bad in [r#"{"simulate": {"test_pairs": 0}}"#, r#"{"eval": {"datasets": []}}"#, r#"{"corpus": {"test_speakers": 1}}"#] {
            assert!(matches!(RunConfig::from_json(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn model_config_takes_rates_from_the_corpus() {
        let cfg = RunConfig::desk();
        let m = cfg.model.model_config(ModelVariant::Spk, Some(VisualField::Mouth), &cfg.corpus);
        assert_eq!((m.sample_rate, m.fps, m.resolution), (cfg.corpus.sample_rate, cfg.corpus.fps, cfg.corpus.resolution));
        assert_eq!(m.visual_field, VisualField::Mouth);
        assert_eq!(m.variant, ModelVariant::Spk);
    }
}
