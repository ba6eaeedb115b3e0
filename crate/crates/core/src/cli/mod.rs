//! Command-line surface: `corpus | simulate | train | evaluate | embed | report`.
//!
//! Failures print one JSON line `{"error": kind, "exit_code": n, "message": ...}`
//! to stderr; exit codes are 2 for configuration, 3 for state/checkpoint and
//! 4 for I/O errors.

pub mod config;
pub mod pipeline;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

pub use config::{EvalSection, ModelSection, RunConfig, SimulateSection, TrainSection};
pub use pipeline::{run_report, Layout, MultiSeedSummary, SeedOutcome};

use crate::avcorpus::{build_corpus, Corpus, Split, VisualField};
use crate::embedviz::{export_embeddings, visualize};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, evaluate_mixture, EvalReport, PesqAdapter};
use crate::mixsim::{build_dataset, Dataset, DatasetVariant};
use crate::sepnet::{ModelVariant, SeparationModel, VisualBranch};
use crate::trainkit::{train_baseline, train_davse, train_spk_step1, train_spk_step2, train_sync, TrainLog};

#[derive(Debug, Parser)]
#[command(name = "avse", version, about = "Decoupled audio-visual speaker extraction on a synthetic corpus")]
pub struct Cli {
    /// Threads for parallel example processing.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    /// Run configuration (JSON); defaults are used when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize the corpus and write its manifest and media.
    Corpus {
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate one mixture dataset and write its descriptor.
    Simulate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        variant: DatasetVariant,
        #[arg(long)]
        split: Split,
        /// Defaults to the configured pair count for the split.
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model variant with its prescribed procedure.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        variant: ModelVariant,
        #[arg(long)]
        field: Option<VisualField>,
        /// Training descriptor; simulated from the config when absent.
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        dev: Option<PathBuf>,
        /// spk only: 1 = identity pretraining, 2 = extraction (needs --init); both when absent.
        #[arg(long)]
        step: Option<u8>,
        /// Checkpoint to continue from (spk step 2).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        spk_ckpt: Option<PathBuf>,
        #[arg(long)]
        sync_ckpt: Option<PathBuf>,
        /// Repetition seed added to the configured model and schedule seeds.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score checkpoints on dataset descriptors.
    Evaluate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long = "ckpt", required = true)]
        ckpts: Vec<PathBuf>,
        #[arg(long = "dataset", required = true)]
        datasets: Vec<PathBuf>,
        /// Also score the unprocessed mixture.
        #[arg(long)]
        mixture: bool,
        #[arg(long)]
        pesq_cmd: Option<PathBuf>,
        /// JSON report; the text table is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Export visual embeddings of test speakers and plot them.
    Embed {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        speakers: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full reproduction: corpus, datasets, all models, evaluation and embeddings.
    Report {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::desk()),
    }
}

fn load_checkpoint(path: &Path) -> Result<SeparationModel> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!("{} does not exist", path.display())));
    }
    SeparationModel::load(path)
}

fn dataset_or_default(arg: Option<&Path>, cfg: &RunConfig, corpus: &Corpus, variant: DatasetVariant, split: Split) -> Result<Dataset> {
    match arg {
        Some(p) => Dataset::load(p),
        None => {
            let pairs = if split == Split::Train { cfg.simulate.train_pairs } else { cfg.simulate.dev_pairs };
            build_dataset(&corpus.manifest, variant, split, cfg.simulate.seed, pairs)
        }
    }
}

fn write_logs(out: &Path, logs: &[TrainLog]) -> Result<PathBuf> {
    let path = out.with_extension("log.jsonl");
    let mut text = String::new();
    for l in logs {
        let mut l = l.clone();
        l.checkpoint = Some(out.display().to_string());
        text.push_str(&l.to_jsonl()?);
        print!("{}", l.to_table());
    }
    fs::write(&path, text)?;
    Ok(path)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    cfg: &RunConfig,
    workers: usize,
    corpus_dir: &Path,
    variant: ModelVariant,
    field: Option<VisualField>,
    train: Option<&Path>,
    dev: Option<&Path>,
    step: Option<u8>,
    init: Option<&Path>,
    spk_ckpt: Option<&Path>,
    sync_ckpt: Option<&Path>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    // Preconditions that need no data are checked first.
    if step.is_some() && variant != ModelVariant::Spk {
        return Err(Error::Config("--step applies to the spk variant only".into()));
    }
    if !matches!(step, None | Some(1) | Some(2)) {
        return Err(Error::Config("--step must be 1 or 2".into()));
    }
    let pretrained = if variant == ModelVariant::Davse {
        let spk = spk_ckpt.ok_or_else(|| Error::Checkpoint("davse training needs --spk-ckpt".into()))?;
        let sync = sync_ckpt.ok_or_else(|| Error::Checkpoint("davse training needs --sync-ckpt".into()))?;
        Some((load_checkpoint(spk)?, load_checkpoint(sync)?))
    } else {
        None
    };
    if step == Some(2) && init.is_none() {
        return Err(Error::State("spk step 2 needs --init with a step-1 checkpoint".into()));
    }
    let corpus = Corpus::load(corpus_dir)?;
    let (schedule, init_seed) = pipeline::seeded(cfg, seed, workers);
    let mut model = match init {
        Some(p) => {
            let m = load_checkpoint(p)?;
            if m.variant() != variant {
                return Err(Error::Checkpoint(format!("--init holds a {} model, expected {variant}", m.variant())));
            }
            m
        }
        None => {
            let n_classes = corpus.manifest.speakers(Split::Train).len();
            SeparationModel::new(cfg.model.model_config(variant, field, corpus.config()), n_classes, init_seed)?
        }
    };
    let dv = pipeline::training_dataset(variant);
    let mut logs = Vec::new();
    if variant == ModelVariant::Spk && step != Some(2) {
        if model.params.is_frozen(VisualBranch::Identity.group()) {
            return Err(Error::State("identity extractor is already pretrained; use --step 2".into()));
        }
        logs.push(train_spk_step1(&mut model, &corpus, &cfg.train.step1_schedule().clone_with(schedule.seed, workers))?);
    }
    if !(variant == ModelVariant::Spk && step == Some(1)) {
        let train = dataset_or_default(train, cfg, &corpus, dv, Split::Train)?;
        let dev = dataset_or_default(dev, cfg, &corpus, dv, Split::Dev)?;
        logs.push(match variant {
            ModelVariant::Baseline => train_baseline(&mut model, &train, &dev, &corpus, &schedule)?,
            ModelVariant::Sync => train_sync(&mut model, &train, &dev, &corpus, &schedule)?,
            ModelVariant::Spk => train_spk_step2(&mut model, &train, &dev, &corpus, &schedule)?,
            ModelVariant::Davse => {
                let (spk, sync) = pretrained.as_ref().expect("checked above");
                train_davse(&mut model, &train, &dev, &corpus, &schedule, Some(spk), Some(sync))?
            }
        });
    }
    ensure_parent(out)?;
    model.save(out)?;
    let log = write_logs(out, &logs)?;
    println!("wrote {} and {}", out.display(), log.display());
    Ok(())
}

trait CloneWith {
    fn clone_with(&self, seed: u64, workers: usize) -> Self;
}

impl CloneWith for crate::trainkit::TrainSchedule {
    fn clone_with(&self, seed: u64, workers: usize) -> Self {
        Self { seed, workers, ..self.clone() }
    }
}

fn cmd_evaluate(
    cfg: &RunConfig,
    workers: usize,
    corpus_dir: &Path,
    ckpts: &[PathBuf],
    datasets: &[PathBuf],
    mixture: bool,
    pesq_cmd: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let models = ckpts.iter().map(|p| load_checkpoint(p)).collect::<Result<Vec<_>>>()?;
    let corpus = Corpus::load(corpus_dir)?;
    let mut opts = pipeline::eval_options(cfg, workers);
    if let Some(p) = pesq_cmd {
        opts.pesq = Some(PesqAdapter::new(p));
    }
    let mut cells = Vec::new();
    for d in datasets {
        let d = Dataset::load(d)?;
        if mixture {
            cells.push(evaluate_mixture(&d, &corpus, &opts)?.0);
        }
        for m in &models {
            let (cell, _) = evaluate(m, &d, &corpus, &opts)?;
            if cell.pesq_failures > 0 {
                let e = Error::PesqUnavailable(format!("{} of {} examples unscored", cell.pesq_failures, cell.count));
                eprintln!("{}", error_line(&e));
            }
            cells.push(cell);
        }
    }
    let seeds = vec![cfg.simulate.seed, cfg.train.schedule.seed, cfg.model.seed];
    let report = EvalReport::new(cells, seeds, &cfg.to_json()?);
    report.save(out)?;
    print!("{}", report.to_table());
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    let workers = cli.workers.max(1);
    match cli.command {
        Command::Corpus { out } => {
            let corpus = build_corpus(&cfg.corpus)?;
            corpus.write(&out)?;
            println!("wrote {} utterances to {} (manifest {})", corpus.manifest.records.len(), out.display(), corpus.manifest.digest()?);
        }
        Command::Simulate { corpus, variant, split, pairs, seed, out } => {
            let manifest = crate::avcorpus::CorpusManifest::load(&corpus)?;
            let s = &cfg.simulate;
            let pairs = pairs.unwrap_or(match split {
                Split::Train => s.train_pairs,
                Split::Dev => s.dev_pairs,
                Split::Test => s.test_pairs,
            });
            let d = build_dataset(&manifest, variant, split, seed.unwrap_or(s.seed), pairs)?;
            ensure_parent(&out)?;
            d.save(&out)?;
            println!("wrote {} {variant} {} pairs to {}", d.len(), split.as_str(), out.display());
        }
        Command::Train { corpus, variant, field, train, dev, step, init, spk_ckpt, sync_ckpt, seed, out } => cmd_train(
            &cfg,
            workers,
            &corpus,
            variant,
            field,
            train.as_deref(),
            dev.as_deref(),
            step,
            init.as_deref(),
            spk_ckpt.as_deref(),
            sync_ckpt.as_deref(),
            seed,
            &out,
        )?,
        Command::Evaluate { corpus, ckpts, datasets, mixture, pesq_cmd, out } => {
            cmd_evaluate(&cfg, workers, &corpus, &ckpts, &datasets, mixture, pesq_cmd.as_deref(), &out)?
        }
        Command::Embed { corpus, ckpt, speakers, seed, out } => {
            let model = load_checkpoint(&ckpt)?;
            let corpus = Corpus::load(&corpus)?;
            let seed = seed.unwrap_or(cfg.eval.embed_seed);
            let dump = export_embeddings(&model, &corpus, speakers.unwrap_or(cfg.eval.embed_speakers), seed)?;
            let stem = out.join(model.variant().as_str());
            dump.save(&stem.with_extension("avt"))?;
            if dump.len() >= 2 {
                let s = visualize(&dump, &stem, seed)?;
                fs::write(out.join(format!("{}_summary.json", model.variant())), serde_json::to_string_pretty(&s)? + "\n")?;
                println!("{} V: frame silhouette {:.3}, utterance silhouette {:.3}", model.variant(), s.frame_silhouette, s.utterance_silhouette);
            } else {
                println!("wrote {} embedding records to {}", dump.len(), stem.with_extension("avt").display());
            }
        }
        Command::Report { seeds, out } => {
            let (summary, _) = run_report(&cfg, &out, &seeds, workers)?;
            print!("{}", summary.to_table());
        }
    }
    Ok(())
}

/// The machine-readable failure line.
pub fn error_line(e: &Error) -> String {
    serde_json::json!({ "error": e.kind(), "exit_code": e.exit_code(), "message": e.to_string() }).to_string()
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let err = Error::Config(e.to_string().lines().next().unwrap_or("invalid arguments").to_string());
            eprint!("{e}");
            eprintln!("{}", error_line(&err));
            return err.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            e.exit_code()
        }
    }
}
