//! Python bindings: corpus synthesis, mixture simulation, models, training
//! procedures, metrics and embedding analysis.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use avse_core::avcorpus::{self, CorpusConfig, Split, VisualField};
use avse_core::cli::{self as core_cli, RunConfig};
use avse_core::embedviz;
use avse_core::evalkit::{self, EvalOptions};
use avse_core::mixsim::{self, DatasetVariant};
use avse_core::sepnet::{self, ModelVariant};
use avse_core::trainkit::{self, TrainSchedule};
use avse_core::{audio::Waveform, Error};

fn py_err(e: Error) -> PyErr {
    let msg = format!("{}: {e}", e.kind());
    match e.exit_code() {
        3 => PyRuntimeError::new_err(msg),
        4 => PyIOError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

fn json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| py_err(e.into()))
}

/// Synthetic audio-visual corpus.
#[pyclass(frozen)]
pub struct Corpus {
    inner: avcorpus::Corpus,
}

#[pymethods]
impl Corpus {
    /// Builds a corpus from a JSON corpus config (defaults when omitted).
    #[new]
    #[pyo3(signature = (config_json=None))]
    fn new(config_json: Option<&str>) -> PyResult<Self> {
        let cfg: CorpusConfig = match config_json {
            Some(s) => serde_json::from_str(s).map_err(|e| py_err(Error::Config(e.to_string())))?,
            None => CorpusConfig::default(),
        };
        cfg.validate().map_err(py_err)?;
        Ok(Self { inner: avcorpus::build_corpus(&cfg).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: avcorpus::Corpus::load(&path).map_err(py_err)? })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write(&path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.manifest.records.len()
    }

    fn speakers(&self, split: &str) -> PyResult<Vec<String>> {
        Ok(self.inner.manifest.speakers(parse(split)?).into_iter().collect())
    }

    fn utterances(&self, split: &str) -> PyResult<Vec<String>> {
        let split: Split = parse(split)?;
        Ok(self.inner.manifest.split(split).map(|r| r.utt_id.clone()).collect())
    }

    fn audio(&self, utt_id: &str) -> PyResult<Vec<f32>> {
        let u = self.inner.utterance(utt_id).ok_or_else(|| PyValueError::new_err(format!("unknown utterance {utt_id}")))?;
        Ok(u.audio.samples().to_vec())
    }

    fn manifest_jsonl(&self) -> PyResult<String> {
        self.inner.manifest.to_jsonl().map_err(py_err)
    }

    fn digest(&self) -> PyResult<String> {
        self.inner.manifest.digest().map_err(py_err)
    }

    /// Nearest-template speaker accuracy of raw frames ("face" or "mouth").
    fn template_accuracy(&self, split: &str, field: &str) -> PyResult<f64> {
        avcorpus::nearest_template_accuracy(&self.inner, parse(split)?, parse::<VisualField>(field)?).map_err(py_err)
    }
}

/// Mixture dataset descriptor.
#[pyclass(frozen)]
pub struct Dataset {
    inner: mixsim::Dataset,
}

#[pymethods]
impl Dataset {
    #[new]
    fn new(corpus: &Corpus, variant: &str, split: &str, seed: u64, pairs: usize) -> PyResult<Self> {
        let d = mixsim::build_dataset(&corpus.inner.manifest, parse::<DatasetVariant>(variant)?, parse(split)?, seed, pairs)
            .map_err(py_err)?;
        Ok(Self { inner: d })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: mixsim::Dataset::load(&path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.variant.to_string()
    }

    fn to_jsonl(&self) -> PyResult<String> {
        self.inner.to_jsonl().map_err(py_err)
    }

    /// Renders example `i` as a dict of waveforms and metadata.
    fn render<'py>(&self, py: Python<'py>, i: usize, corpus: &Corpus) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
        if i >= self.inner.len() {
            return Err(PyValueError::new_err(format!("index {i} out of range")));
        }
        let ex = self.inner.render(i, &corpus.inner).map_err(py_err)?;
        let d = pyo3::types::PyDict::new(py);
        d.set_item("mixture", ex.mixture.samples().to_vec())?;
        d.set_item("target", ex.target.samples().to_vec())?;
        d.set_item("interferer", ex.interferer.samples().to_vec())?;
        d.set_item("sir_db", ex.sir_db)?;
        d.set_item("target_speaker_id", ex.target_speaker_id)?;
        d.set_item("interferer_speaker_id", ex.interferer_speaker_id)?;
        d.set_item("visual_utt_id", ex.visual_utt_id)?;
        d.set_item("group_pair", ex.group_pair.as_str())?;
        Ok(d)
    }
}

/// Extraction model of one variant.
#[pyclass]
pub struct Model {
    inner: sepnet::SeparationModel,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (variant, n_classes=0, seed=0, field="face"))]
    fn new(variant: &str, n_classes: usize, seed: u64, field: &str) -> PyResult<Self> {
        let mut cfg = sepnet::ModelConfig::with_variant(parse(variant)?);
        cfg.visual_field = parse(field)?;
        Ok(Self { inner: sepnet::SeparationModel::new(cfg, n_classes, seed).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: sepnet::SeparationModel::load(&path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.variant().to_string()
    }

    #[getter]
    fn frozen_set(&self) -> Vec<String> {
        self.inner.frozen_set()
    }

    fn total_count(&self) -> usize {
        self.inner.params.total_count()
    }

    fn trainable_count(&self) -> usize {
        self.inner.params.trainable_count()
    }

    /// Estimated target waveform for example `i` of `dataset`.
    fn extract(&self, dataset: &Dataset, i: usize, corpus: &Corpus) -> PyResult<Vec<f32>> {
        let ex = dataset.inner.render(i, &corpus.inner).map_err(py_err)?;
        Ok(self.inner.extract(&ex.mixture, &ex.visual).map_err(py_err)?.estimate.samples().to_vec())
    }

    /// Per-frame visual embedding V (`frames x dim`) of a corpus utterance.
    fn embedding(&self, corpus: &Corpus, utt_id: &str) -> PyResult<Vec<Vec<f32>>> {
        let u = corpus.inner.utterance(utt_id).ok_or_else(|| PyValueError::new_err(format!("unknown utterance {utt_id}")))?;
        let v = self.inner.embedding(&u.video).map_err(py_err)?;
        Ok(v.features.data().chunks(v.dim()).map(<[f32]>::to_vec).collect())
    }

    /// Runs the matching training procedure; returns the log as JSON lines.
    /// spk runs both steps; davse needs `spk` and `sync`.
    #[pyo3(signature = (corpus, train=None, dev=None, schedule_json=None, spk=None, sync=None))]
    fn train(
        &mut self,
        corpus: &Corpus,
        train: Option<&Dataset>,
        dev: Option<&Dataset>,
        schedule_json: Option<&str>,
        spk: Option<PyRef<'_, Model>>,
        sync: Option<PyRef<'_, Model>>,
    ) -> PyResult<String> {
        let schedule: TrainSchedule = match schedule_json {
            Some(s) => serde_json::from_str(s).map_err(|e| py_err(Error::Config(e.to_string())))?,
            None => TrainSchedule::default(),
        };
        let c = &corpus.inner;
        let m = &mut self.inner;
        let logs = match m.variant() {
            ModelVariant::Spk => {
                let mut logs = Vec::new();
                if !m.params.is_frozen(sepnet::VisualBranch::Identity.group()) {
                    logs.push(trainkit::train_spk_step1(m, c, &schedule).map_err(py_err)?);
                }
                if let (Some(t), Some(d)) = (train, dev) {
                    logs.push(trainkit::train_spk_step2(m, &t.inner, &d.inner, c, &schedule).map_err(py_err)?);
                }
                logs
            }
            ModelVariant::Baseline => vec![trainkit::train_baseline(m, need(train)?, need(dev)?, c, &schedule).map_err(py_err)?],
            ModelVariant::Sync => vec![trainkit::train_sync(m, need(train)?, need(dev)?, c, &schedule).map_err(py_err)?],
            ModelVariant::Davse => {
                let spk = spk.as_ref().map(|p| &p.inner);
                let sync = sync.as_ref().map(|p| &p.inner);
                vec![trainkit::train_davse(m, need(train)?, need(dev)?, c, &schedule, spk, sync).map_err(py_err)?]
            }
        };
        let mut out = String::new();
        for l in logs {
            out.push_str(&l.to_jsonl().map_err(py_err)?);
        }
        Ok(out)
    }

    /// Frame-level identity accuracy on held-out training-speaker utterances (spk only).
    fn identity_accuracy(&self, corpus: &Corpus) -> PyResult<f64> {
        trainkit::identity_accuracy(&self.inner, &corpus.inner, 1).map_err(py_err)
    }

    /// Evaluation cell (JSON) on `dataset`.
    #[pyo3(signature = (dataset, corpus, workers=1))]
    fn evaluate(&self, dataset: &Dataset, corpus: &Corpus, workers: usize) -> PyResult<String> {
        let opts = EvalOptions { workers, ..Default::default() };
        json(&evalkit::evaluate(&self.inner, &dataset.inner, &corpus.inner, &opts).map_err(py_err)?.0)
    }

    /// Embedding dump of `n_speakers` test speakers, projected and normalized:
    /// `(speaker_ids, points)`.
    fn embed(&self, corpus: &Corpus, n_speakers: usize, seed: u64) -> PyResult<(Vec<String>, Vec<[f64; 2]>)> {
        let dump = embedviz::export_embeddings(&self.inner, &corpus.inner, n_speakers, seed).map_err(py_err)?;
        let pts = embedviz::minmax_norm(&embedviz::project_2d(&dump).map_err(py_err)?);
        Ok((dump.records.into_iter().map(|r| r.speaker_id).collect(), pts))
    }
}

fn need(d: Option<&Dataset>) -> PyResult<&mixsim::Dataset> {
    d.map(|d| &d.inner).ok_or_else(|| PyValueError::new_err("train and dev datasets are required"))
}

fn wave(v: Vec<f32>) -> PyResult<Waveform> {
    Waveform::new(v, avse_core::audio::DEFAULT_SAMPLE_RATE).map_err(py_err)
}

#[pyfunction]
fn si_snr(reference: Vec<f64>, estimate: Vec<f64>) -> PyResult<f64> {
    trainkit::si_snr(&reference, &estimate).map_err(py_err)
}

#[pyfunction]
fn si_snri(mixture: Vec<f32>, estimate: Vec<f32>, target: Vec<f32>) -> PyResult<f64> {
    evalkit::si_snri(&wave(mixture)?, &wave(estimate)?, &wave(target)?).map_err(py_err)
}

/// Mean frame-level cross-entropy of `L x C` logits (row-major) for `label`.
#[pyfunction]
fn ce_loss(logits: Vec<f32>, n_classes: usize, label: usize) -> PyResult<f64> {
    trainkit::ce_loss(&logits, n_classes, label).map_err(py_err)
}

/// Learning rates per epoch and the stopping epoch for a dev-loss trace.
#[pyfunction]
#[pyo3(signature = (losses, max_epochs=100))]
fn replay_schedule(losses: Vec<f64>, max_epochs: usize) -> (Vec<f64>, Option<usize>) {
    let s = TrainSchedule { max_epochs, ..TrainSchedule::default() };
    let (lrs, stop) = trainkit::replay(&s, &losses);
    (lrs, stop.map(|(e, _)| e))
}

#[pyfunction]
fn project_2d(rows: Vec<Vec<f32>>) -> PyResult<Vec<[f64; 2]>> {
    embedviz::project_rows(&rows).map_err(py_err)
}

#[pyfunction]
fn minmax_norm(points: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    embedviz::minmax_norm(&points)
}

#[pyfunction]
fn silhouette(points: Vec<Vec<f64>>, labels: Vec<String>) -> PyResult<f64> {
    embedviz::silhouette(&points, &labels).map_err(py_err)
}

/// Full pipeline from a run config (JSON); returns the multi-seed summary as JSON.
#[pyfunction]
#[pyo3(signature = (out_dir, config_json=None, seeds=vec![0], workers=1))]
fn run_report(py: Python<'_>, out_dir: PathBuf, config_json: Option<&str>, seeds: Vec<u64>, workers: usize) -> PyResult<String> {
    let cfg = match config_json {
        Some(s) => RunConfig::from_json(s).map_err(py_err)?,
        None => RunConfig::desk(),
    };
    let (summary, _) = py.detach(|| core_cli::run_report(&cfg, &out_dir, &seeds, workers)).map_err(py_err)?;
    json(&summary)
}

#[pymodule]
fn avse(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Corpus>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(si_snr, m)?)?;
    m.add_function(wrap_pyfunction!(si_snri, m)?)?;
    m.add_function(wrap_pyfunction!(ce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(replay_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(project_2d, m)?)?;
    m.add_function(wrap_pyfunction!(minmax_norm, m)?)?;
    m.add_function(wrap_pyfunction!(silhouette, m)?)?;
    m.add_function(wrap_pyfunction!(run_report, m)?)?;
    m.add("SIR_RANGE_DB", mixsim::SIR_RANGE_DB)?;
    Ok(())
}
