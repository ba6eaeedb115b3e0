//! SI-SNR(i) scoring of extraction models, stratified by speaker-group pair,
//! with an optional external PESQ scorer.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::avcorpus::{hex_digest, Corpus};
use crate::error::{Error, Result};
use crate::mixsim::{Dataset, DatasetVariant, GroupPair};
use crate::par::map_indexed;
use crate::sepnet::SeparationModel;
use crate::trainkit::si_snr;

/// `SI-SNR(target, est) - SI-SNR(target, mixture)`.
pub fn si_snri(mixture: &Waveform, est: &Waveform, target: &Waveform) -> Result<f64> {
    if mixture.len() != est.len() || est.len() != target.len() {
        return Err(Error::Shape(format!(
            "lengths differ: mixture {}, estimate {}, target {}",
            mixture.len(),
            est.len(),
            target.len()
        )));
    }
    Ok(si_snr(target.samples(), est.samples())? - si_snr(target.samples(), mixture.samples())?)
}

/// External PESQ scorer: invoked as `<cmd> <reference.wav> <estimate.wav>`,
/// it must print the score as the last whitespace-separated token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PesqAdapter {
    pub cmd: PathBuf,
}

static SCRATCH: AtomicU64 = AtomicU64::new(0);

impl PesqAdapter {
    pub fn new(cmd: impl Into<PathBuf>) -> Self {
        Self { cmd: cmd.into() }
    }

    pub fn score(&self, reference: &Waveform, estimate: &Waveform) -> Result<f64> {
        let unavailable = |m: String| Error::PesqUnavailable(m);
        let dir = std::env::temp_dir().join(format!("avse-pesq-{}-{}", std::process::id(), SCRATCH.fetch_add(1, Ordering::Relaxed)));
        fs::create_dir_all(&dir)?;
        let (r, e) = (dir.join("reference.wav"), dir.join("estimate.wav"));
        let peak = estimate.peak().max(1.0);
        reference.write_wav(&r)?;
        estimate.scaled(1.0 / peak).write_wav(&e)?;
        let out = Command::new(&self.cmd).arg(&r).arg(&e).output();
        let _ = fs::remove_dir_all(&dir);
        let out = out.map_err(|err| unavailable(format!("{}: {err}", self.cmd.display())))?;
        if !out.status.success() {
            return Err(unavailable(format!("{} exited with {}", self.cmd.display(), out.status)));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        text.split_whitespace()
            .last()
            .and_then(|t| t.parse::<f64>().ok())
            .filter(|v| v.is_finite())
            .ok_or_else(|| unavailable(format!("unparseable PESQ output {text:?}")))
    }
}

/// Score from the configured adapter; `None` when no scorer is configured.
pub fn pesq_adapter(adapter: Option<&PesqAdapter>, reference: &Waveform, estimate: &Waveform) -> Result<Option<f64>> {
    adapter.map(|a| a.score(reference, estimate)).transpose()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub index: usize,
    pub group_pair: GroupPair,
    pub si_snr: f64,
    pub si_snri: f64,
    pub pesq: Option<f64>,
    pub pesq_error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub count: usize,
    pub si_snr_mean: f64,
    pub si_snri_mean: f64,
    pub si_snr_median: f64,
    pub si_snri_median: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pesq_mean: Option<f64>,
}

/// One (model, dataset, visual field) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub model: String,
    pub dataset_variant: DatasetVariant,
    pub visual_field: String,
    pub count: usize,
    pub si_snr_mean: f64,
    pub si_snri_mean: f64,
    pub si_snr_median: f64,
    pub si_snri_median: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pesq_mean: Option<f64>,
    #[serde(skip_serializing_if = "is_zero", default)]
    pub pesq_failures: usize,
    pub strata: BTreeMap<GroupPair, Stratum>,
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

fn stratum(scores: &[&ExampleScore]) -> Stratum {
    let a: Vec<f64> = scores.iter().map(|s| s.si_snr).collect();
    let b: Vec<f64> = scores.iter().map(|s| s.si_snri).collect();
    let p: Vec<f64> = scores.iter().filter_map(|s| s.pesq).collect();
    Stratum {
        count: scores.len(),
        si_snr_mean: mean(&a),
        si_snri_mean: mean(&b),
        si_snr_median: median(&a),
        si_snri_median: median(&b),
        pesq_mean: (!p.is_empty()).then(|| mean(&p)),
    }
}

impl EvalCell {
    /// Aggregates per-example scores; the result does not depend on their order
    /// beyond floating-point summation.
    pub fn from_scores(model: &str, dataset_variant: DatasetVariant, visual_field: &str, scores: &[ExampleScore]) -> Self {
        let mut sorted: Vec<&ExampleScore> = scores.iter().collect();
        sorted.sort_by_key(|s| s.index);
        let all = stratum(&sorted);
        let mut strata = BTreeMap::new();
        for gp in [GroupPair::Diff, GroupPair::Same] {
            let part: Vec<&ExampleScore> = sorted.iter().copied().filter(|s| s.group_pair == gp).collect();
            if !part.is_empty() {
                strata.insert(gp, stratum(&part));
            }
        }
        EvalCell {
            model: model.to_string(),
            dataset_variant,
            visual_field: visual_field.to_string(),
            count: all.count,
            si_snr_mean: all.si_snr_mean,
            si_snri_mean: all.si_snri_mean,
            si_snr_median: all.si_snr_median,
            si_snri_median: all.si_snri_median,
            pesq_mean: all.pesq_mean,
            pesq_failures: scores.iter().filter(|s| s.pesq_error.is_some()).count(),
            strata,
        }
    }

    pub fn stratum(&self, gp: GroupPair) -> Option<&Stratum> {
        self.strata.get(&gp)
    }
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub workers: usize,
    pub pesq: Option<PesqAdapter>,
    /// Score only the first `n` examples (0 = all).
    pub max_examples: usize,
}

fn check_compatible(model: &SeparationModel, corpus: &Corpus) -> Result<()> {
    let (m, c) = (&model.config, corpus.config());
    if m.sample_rate != c.sample_rate || m.fps != c.fps || m.resolution != c.resolution {
        return Err(Error::Config(format!(
            "model expects {} Hz / {} fps / {} px, corpus is {} Hz / {} fps / {} px",
            m.sample_rate, m.fps, m.resolution, c.sample_rate, c.fps, c.resolution
        )));
    }
    Ok(())
}

fn score_examples<F>(dataset: &Dataset, corpus: &Corpus, opts: &EvalOptions, estimate: F) -> Result<Vec<ExampleScore>>
where
    F: Fn(&crate::mixsim::MixtureExample) -> Result<Waveform> + Sync,
{
    let n = if opts.max_examples == 0 { dataset.len() } else { opts.max_examples.min(dataset.len()) };
    map_indexed(n, opts.workers, |i| -> Result<ExampleScore> {
        let ex = dataset.render(i, corpus)?;
        let est = estimate(&ex)?;
        let (pesq, pesq_error) = match pesq_adapter(opts.pesq.as_ref(), &ex.target, &est) {
            Ok(p) => (p, None),
            Err(e) => (None, Some(e.to_string())),
        };
        Ok(ExampleScore {
            index: i,
            group_pair: ex.group_pair,
            si_snr: si_snr(ex.target.samples(), est.samples())?,
            si_snri: si_snri(&ex.mixture, &est, &ex.target)?,
            pesq,
            pesq_error,
        })
    })
    .into_iter()
    .collect()
}

/// Scores `model` on every example of `dataset`.
pub fn evaluate(model: &SeparationModel, dataset: &Dataset, corpus: &Corpus, opts: &EvalOptions) -> Result<(EvalCell, Vec<ExampleScore>)> {
    check_compatible(model, corpus)?;
    let scores = score_examples(dataset, corpus, opts, |ex| Ok(model.extract(&ex.mixture, &ex.visual)?.estimate))?;
    let cell = EvalCell::from_scores(model.variant().as_str(), dataset.variant, model.config.visual_field.as_str(), &scores);
    Ok((cell, scores))
}

/// The unprocessed mixture scored as its own estimate.
pub fn evaluate_mixture(dataset: &Dataset, corpus: &Corpus, opts: &EvalOptions) -> Result<(EvalCell, Vec<ExampleScore>)> {
    let scores = score_examples(dataset, corpus, opts, |ex| Ok(ex.mixture.clone()))?;
    Ok((EvalCell::from_scores("mixture", dataset.variant, "-", &scores), scores))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cells: Vec<EvalCell>,
    pub seeds: Vec<u64>,
    pub config_digest: String,
}

impl EvalReport {
    pub fn new(cells: Vec<EvalCell>, seeds: Vec<u64>, config_json: &str) -> Self {
        Self { cells, seeds, config_digest: hex_digest(config_json.as_bytes()) }
    }

    pub fn cell(&self, model: &str, field: &str, dataset: DatasetVariant) -> Option<&EvalCell> {
        self.cells.iter().find(|c| c.model == model && c.visual_field == field && c.dataset_variant == dataset)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Rows are models, columns are datasets; each dataset shows mean SI-SNR,
    /// mean SI-SNRi and the per-stratum SI-SNRi.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, String)> = Vec::new();
        for c in &self.cells {
            let key = (c.model.clone(), c.visual_field.clone());
            if !rows.contains(&key) {
                rows.push(key);
            }
        }
        let mut datasets: Vec<DatasetVariant> = self.cells.iter().map(|c| c.dataset_variant).collect();
        datasets.sort();
        datasets.dedup();
        let pesq = self.cells.iter().any(|c| c.pesq_mean.is_some());
        let cols = if pesq { ["SI-SNR", "SI-SNRi", "Diff", "Same", "PESQ"].as_slice() } else { ["SI-SNR", "SI-SNRi", "Diff", "Same"].as_slice() };
        let mut out = format!("{:<16}", "");
        for d in &datasets {
            out.push_str(&format!("| {:^width$}", d.as_str(), width = cols.len() * 9 - 1));
        }
        out.push('\n');
        out.push_str(&format!("{:<16}", "model"));
        for _ in &datasets {
            out.push('|');
            for c in cols {
                out.push_str(&format!("{c:>8} "));
            }
        }
        out.push('\n');
        for (model, field) in &rows {
            let label = if field == "-" { model.clone() } else { format!("{model} ({field})") };
            out.push_str(&format!("{label:<16}"));
            for d in &datasets {
                out.push('|');
                match self.cell(model, field, *d) {
                    Some(c) => {
                        let st = |g| c.stratum(g).map_or("-".to_string(), |s| format!("{:.2}", s.si_snri_mean));
                        out.push_str(&format!("{:>8.2} {:>8.2} {:>8} {:>8} ", c.si_snr_mean, c.si_snri_mean, st(GroupPair::Diff), st(GroupPair::Same)));
                        if pesq {
                            out.push_str(&format!("{:>8} ", c.pesq_mean.map_or("-".into(), |p| format!("{p:.2}"))));
                        }
                    }
                    None => {
                        for _ in cols {
                            out.push_str(&format!("{:>8} ", "-"));
                        }
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, json_path: &Path) -> Result<()> {
        if let Some(dir) = json_path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(json_path, self.to_json()?)?;
        fs::write(json_path.with_extension("txt"), self.to_table())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::avcorpus::{build_corpus, CorpusConfig, Split};
    use crate::mixsim::build_dataset;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wave(v: Vec<f32>) -> Waveform {
        Waveform::new(v, 8000).unwrap()
    }

    fn random(n: usize, rng: &mut ChaCha8Rng) -> Waveform {
        wave((0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn improvement_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (m, t) = (random(200, &mut rng), random(200, &mut rng));
        assert_eq!(si_snri(&m, &m, &t).unwrap(), 0.0);
        let perfect = si_snri(&m, &t, &t).unwrap();
        assert!((perfect - (si_snr(t.samples(), t.samples()).unwrap() - si_snr(t.samples(), m.samples()).unwrap())).abs() < 1e-12);
        assert!(si_snr(t.samples(), t.samples()).unwrap() > 79.0);
        for _ in 0..20 {
            let (m, e, t) = (random(64, &mut rng), random(64, &mut rng), random(64, &mut rng));
            let two_calls = si_snr(t.samples(), e.samples()).unwrap() - si_snr(t.samples(), m.samples()).unwrap();
            assert!((si_snri(&m, &e, &t).unwrap() - two_calls).abs() < 1e-12);
        }
        assert!(matches!(si_snri(&m, &random(10, &mut rng), &t), Err(Error::Shape(_))));
    }

    #[test]
    fn mixture_pseudo_model_scores_zero_and_strata_are_complete() {
        let corpus = build_corpus(&CorpusConfig {
            train_speakers: 4,
            dev_speakers: 4,
            test_speakers: 4,
            utterances_per_speaker: 2,
            ..Default::default()
        })
        .unwrap();
        let d = build_dataset(&corpus.manifest, DatasetVariant::Dsav, Split::Test, 4, 12).unwrap();
        let (cell, scores) = evaluate_mixture(&d, &corpus, &EvalOptions { workers: 3, ..Default::default() }).unwrap();
        assert_eq!(cell.si_snri_mean, 0.0);
        assert_eq!(cell.count, 12);
        assert_eq!(cell.strata.values().map(|s| s.count).sum::<usize>(), 12);
        assert!(cell.pesq_mean.is_none());
        let mut shuffled = scores.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(2));
        let again = EvalCell::from_scores("mixture", d.variant, "-", &shuffled);
        assert_eq!(again, cell);
        let report = EvalReport::new(vec![cell], vec![4], "{}");
        assert!(report.to_table().contains("mixture"));
        let json = report.to_json().unwrap();
        assert!(!json.contains("pesq"));
        assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), report);
    }

    #[test]
    fn pesq_is_optional_and_failures_are_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b) = (random(800, &mut rng), random(800, &mut rng));
        assert_eq!(pesq_adapter(None, &a, &b).unwrap(), None);
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.sh");
        fs::write(&good, "#!/bin/sh\necho \"PESQ score: 2.74\"\n").unwrap();
        let bad = dir.path().join("bad.sh");
        fs::write(&bad, "#!/bin/sh\nexit 3\n").unwrap();
        for p in [&good, &bad] {
            use std::os::unix::fs::PermissionsExt;
            fs::set_permissions(p, fs::Permissions::from_mode(0o755)).unwrap();
        }
        assert_eq!(pesq_adapter(Some(&PesqAdapter::new(&good)), &a, &b).unwrap(), Some(2.74));
        assert!(matches!(pesq_adapter(Some(&PesqAdapter::new(&bad)), &a, &b), Err(Error::PesqUnavailable(_))));
        assert!(matches!(PesqAdapter::new(dir.path().join("missing")).score(&a, &b), Err(Error::PesqUnavailable(_))));
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
