//! End-to-end orchestration: corpus, datasets, the five trained models,
//! evaluation and the embedding study, laid out under one directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::avcorpus::{build_corpus, Corpus, Split, VisualField};
use crate::embedviz::{export_embeddings, visualize, VizSummary};
use crate::error::Result;
use crate::evalkit::{evaluate, evaluate_mixture, median, EvalCell, EvalOptions, EvalReport, PesqAdapter};
use crate::mixsim::{build_dataset, Dataset, DatasetVariant, GroupPair};
use crate::sepnet::{ModelVariant, SeparationModel};
use crate::trainkit::{train_baseline, train_davse, train_spk_step1, train_spk_step2, train_sync, TrainLog, TrainSchedule};

/// Dataset each variant is trained on.
pub fn training_dataset(variant: ModelVariant) -> DatasetVariant {
    match variant {
        ModelVariant::Baseline | ModelVariant::Davse => DatasetVariant::Dsav,
        ModelVariant::Spk => DatasetVariant::Dssv,
        ModelVariant::Sync => DatasetVariant::Ssav,
    }
}

/// File layout of a pipeline run.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn dataset(&self, variant: DatasetVariant, split: Split) -> PathBuf {
        self.root.join("data").join(format!("{variant}_{split}.jsonl", split = split.as_str()))
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed{seed}"))
    }

    pub fn checkpoint(&self, seed: u64, name: &str) -> PathBuf {
        self.seed_dir(seed).join("ckpt").join(format!("{name}.avck"))
    }

    pub fn train_log(&self, seed: u64, name: &str) -> PathBuf {
        self.seed_dir(seed).join("logs").join(format!("{name}.jsonl"))
    }

    pub fn report(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("report.json")
    }

    pub fn embed_dir(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("embed")
    }
}

pub type Datasets = BTreeMap<(DatasetVariant, Split), Dataset>;

/// Builds and writes the corpus and every dataset descriptor.
pub fn prepare_data(cfg: &RunConfig, layout: &Layout) -> Result<(Corpus, Datasets)> {
    let corpus = build_corpus(&cfg.corpus)?;
    corpus.write(&layout.corpus())?;
    let s = &cfg.simulate;
    let mut datasets = Datasets::new();
    for v in [DatasetVariant::Dsav, DatasetVariant::Dssv, DatasetVariant::Ssav] {
        for (split, pairs) in [(Split::Train, s.train_pairs), (Split::Dev, s.dev_pairs), (Split::Test, s.test_pairs)] {
            let d = build_dataset(&corpus.manifest, v, split, s.seed, pairs)?;
            d.save(&layout.dataset(v, split))?;
            datasets.insert((v, split), d);
        }
    }
    Ok((corpus, datasets))
}

/// Seed-shifted schedule and init seed for one repetition.
pub fn seeded(cfg: &RunConfig, seed: u64, workers: usize) -> (TrainSchedule, u64) {
    let schedule = TrainSchedule { seed: cfg.train.schedule.seed.wrapping_add(seed), workers, ..cfg.train.schedule.clone() };
    (schedule, cfg.model.seed.wrapping_add(seed))
}

/// Pretrained branches needed by davse.
#[derive(Clone, Copy, Default)]
pub struct Pretrained<'a> {
    pub spk: Option<&'a SeparationModel>,
    pub sync: Option<&'a SeparationModel>,
}

/// Trains one variant with its prescribed procedure(s); spk runs both steps in order.
#[allow(clippy::too_many_arguments)]
pub fn train_model(
    cfg: &RunConfig,
    variant: ModelVariant,
    field: VisualField,
    seed: u64,
    workers: usize,
    corpus: &Corpus,
    datasets: &Datasets,
    pretrained: Pretrained<'_>,
) -> Result<(SeparationModel, Vec<TrainLog>)> {
    let (schedule, init) = seeded(cfg, seed, workers);
    let n_classes = corpus.manifest.speakers(Split::Train).len();
    let mut model = SeparationModel::new(cfg.model.model_config(variant, Some(field), &cfg.corpus), n_classes, init)?;
    let dv = training_dataset(variant);
    let train = &datasets[&(dv, Split::Train)];
    let dev = &datasets[&(dv, Split::Dev)];
    let logs = match variant {
        ModelVariant::Baseline => vec![train_baseline(&mut model, train, dev, corpus, &schedule)?],
        ModelVariant::Sync => vec![train_sync(&mut model, train, dev, corpus, &schedule)?],
        ModelVariant::Spk => {
            let step1 = TrainSchedule { max_epochs: cfg.train.step1_max_epochs, ..schedule.clone() };
            let l1 = train_spk_step1(&mut model, corpus, &step1)?;
            vec![l1, train_spk_step2(&mut model, train, dev, corpus, &schedule)?]
        }
        ModelVariant::Davse => vec![train_davse(&mut model, train, dev, corpus, &schedule, pretrained.spk, pretrained.sync)?],
    };
    Ok((model, logs))
}

pub fn eval_options(cfg: &RunConfig, workers: usize) -> EvalOptions {
    EvalOptions { workers, pesq: cfg.eval.pesq_cmd.as_ref().map(PesqAdapter::new), max_examples: cfg.eval.max_examples }
}

/// Outcome of one seed.
#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub report: EvalReport,
    pub viz: Vec<VizSummary>,
    pub logs: BTreeMap<String, Vec<TrainLog>>,
}

/// Model rows of the results table, in training order.
pub const MODEL_ROWS: [(&str, ModelVariant, VisualField); 5] = [
    ("baseline", ModelVariant::Baseline, VisualField::Face),
    ("sync", ModelVariant::Sync, VisualField::Face),
    ("spk", ModelVariant::Spk, VisualField::Face),
    ("spk_mouth", ModelVariant::Spk, VisualField::Mouth),
    ("davse", ModelVariant::Davse, VisualField::Face),
];

/// Trains, evaluates and visualizes all models for one seed.
pub fn run_seed(cfg: &RunConfig, layout: &Layout, corpus: &Corpus, datasets: &Datasets, seed: u64, workers: usize) -> Result<SeedOutcome> {
    let mut models: BTreeMap<&str, SeparationModel> = BTreeMap::new();
    let mut logs = BTreeMap::new();
    for (name, variant, field) in MODEL_ROWS {
        let pretrained = Pretrained { spk: models.get("spk"), sync: models.get("sync") };
        let (model, model_logs) = train_model(cfg, variant, field, seed, workers, corpus, datasets, pretrained)?;
        let ckpt = layout.checkpoint(seed, name);
        model.save(&ckpt)?;
        let mut text = String::new();
        for mut l in model_logs.clone() {
            l.checkpoint = Some(ckpt.display().to_string());
            text.push_str(&l.to_jsonl()?);
        }
        fs::create_dir_all(layout.train_log(seed, name).parent().unwrap_or(Path::new(".")))?;
        fs::write(layout.train_log(seed, name), text)?;
        logs.insert(name.to_string(), model_logs);
        models.insert(name, model);
    }
    let opts = eval_options(cfg, workers);
    let mut cells = Vec::new();
    for &dv in &cfg.eval.datasets {
        let test = &datasets[&(dv, Split::Test)];
        cells.push(evaluate_mixture(test, corpus, &opts)?.0);
        for (name, ..) in MODEL_ROWS {
            cells.push(evaluate(&models[name], test, corpus, &opts)?.0);
        }
    }
    let report = EvalReport::new(cells, vec![seed], &cfg.to_json()?);
    report.save(&layout.report(seed))?;
    let mut viz = Vec::new();
    for name in ["baseline", "davse"] {
        let dump = export_embeddings(&models[name], corpus, cfg.eval.embed_speakers, cfg.eval.embed_seed)?;
        let stem = layout.embed_dir(seed).join(name);
        dump.save(&stem.with_extension("avt"))?;
        if dump.len() >= 2 {
            viz.push(visualize(&dump, &stem, seed)?);
        }
    }
    fs::write(layout.embed_dir(seed).join("summary.json"), serde_json::to_string_pretty(&viz)? + "\n")?;
    Ok(SeedOutcome { seed, report, viz, logs })
}

/// Per-row medians over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MedianRow {
    pub model: String,
    pub visual_field: String,
    pub dataset_variant: DatasetVariant,
    pub si_snr: f64,
    pub si_snri: f64,
    pub si_snri_diff: Option<f64>,
    pub si_snri_same: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedSummary {
    pub seeds: Vec<u64>,
    pub config_digest: String,
    pub rows: Vec<MedianRow>,
    /// Median silhouette of frame-level V per model.
    pub frame_silhouette: BTreeMap<String, f64>,
    pub utterance_silhouette: BTreeMap<String, f64>,
}

impl MultiSeedSummary {
    pub fn from_outcomes(outcomes: &[SeedOutcome], config_digest: String) -> Self {
        let Some(first) = outcomes.first() else {
            return Self { seeds: vec![], config_digest, rows: vec![], frame_silhouette: BTreeMap::new(), utterance_silhouette: BTreeMap::new() };
        };
        let rows = first
            .report
            .cells
            .iter()
            .map(|c| {
                let same: Vec<&EvalCell> =
                    outcomes.iter().filter_map(|o| o.report.cell(&c.model, &c.visual_field, c.dataset_variant)).collect();
                let med = |f: &dyn Fn(&EvalCell) -> Option<f64>| {
                    let v: Vec<f64> = same.iter().filter_map(|c| f(c)).collect();
                    (!v.is_empty()).then(|| median(&v))
                };
                MedianRow {
                    model: c.model.clone(),
                    visual_field: c.visual_field.clone(),
                    dataset_variant: c.dataset_variant,
                    si_snr: med(&|c| Some(c.si_snr_mean)).unwrap_or(0.0),
                    si_snri: med(&|c| Some(c.si_snri_mean)).unwrap_or(0.0),
                    si_snri_diff: med(&|c| c.stratum(GroupPair::Diff).map(|s| s.si_snri_mean)),
                    si_snri_same: med(&|c| c.stratum(GroupPair::Same).map(|s| s.si_snri_mean)),
                }
            })
            .collect();
        let sil = |f: fn(&VizSummary) -> f64| -> BTreeMap<String, f64> {
            let mut by: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for o in outcomes {
                for v in &o.viz {
                    by.entry(v.model_variant.to_string()).or_default().push(f(v));
                }
            }
            by.into_iter().map(|(k, v)| (k, median(&v))).collect()
        };
        Self {
            seeds: outcomes.iter().map(|o| o.seed).collect(),
            config_digest,
            rows,
            frame_silhouette: sil(|v| v.frame_silhouette),
            utterance_silhouette: sil(|v| v.utterance_silhouette),
        }
    }

    pub fn row(&self, model: &str, field: VisualField, dataset: DatasetVariant) -> Option<&MedianRow> {
        self.rows.iter().find(|r| r.model == model && r.visual_field == field.as_str() && r.dataset_variant == dataset)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("median over seeds {:?}\n", self.seeds);
        out.push_str(&format!(
            "{:<18}{:<6}{:>9}{:>9}{:>9}{:>9}\n",
            "model", "data", "SI-SNR", "SI-SNRi", "Diff", "Same"
        ));
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
        for r in &self.rows {
            let label = if r.visual_field == "-" { r.model.clone() } else { format!("{} ({})", r.model, r.visual_field) };
            out.push_str(&format!(
                "{label:<18}{:<6}{:>9.2}{:>9.2}{:>9}{:>9}\n",
                r.dataset_variant.as_str(),
                r.si_snr,
                r.si_snri,
                opt(r.si_snri_diff),
                opt(r.si_snri_same)
            ));
        }
        for (k, v) in &self.frame_silhouette {
            out.push_str(&format!("silhouette {k}: frames {v:.3}, utterances {:.3}\n", self.utterance_silhouette.get(k).copied().unwrap_or(f64::NAN)));
        }
        out
    }
}

/// Full reproduction: data once, then every seed; writes `summary.json/.txt`.
pub fn run_report(cfg: &RunConfig, root: &Path, seeds: &[u64], workers: usize) -> Result<(MultiSeedSummary, Vec<SeedOutcome>)> {
    cfg.validate()?;
    let layout = Layout::new(root);
    fs::create_dir_all(root)?;
    fs::write(root.join("config.json"), cfg.to_json()?)?;
    let (corpus, datasets) = prepare_data(cfg, &layout)?;
    let outcomes = seeds.iter().map(|&s| run_seed(cfg, &layout, &corpus, &datasets, s, workers)).collect::<Result<Vec<_>>>()?;
    let summary = MultiSeedSummary::from_outcomes(&outcomes, cfg.digest()?);
    fs::write(root.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    fs::write(root.join("summary.txt"), summary.to_table())?;
    Ok((summary, outcomes))
}
