//! Training loops. Randomness (epoch order, crops, dssv reshuffles) derives
//! from the schedule seed, so results do not depend on worker count.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::{ce_loss_grad, si_snr_loss_grad, SiSnrOptions};
use super::schedule::{PlateauTracker, StopReason, TrainSchedule};
use super::{BatchAudit, EpochRecord, TrainLog};
use crate::avcorpus::{stable_seed, Corpus, Split};
use crate::error::{Error, Result};
use crate::mixsim::{Dataset, DatasetVariant, MixtureExample};
use crate::nn::{Adam, Graph, ParamStore, Tensor};
use crate::par::map_indexed;
use crate::sepnet::{BranchFeatures, MaskMode, ModelVariant, SeparationModel, VisualBranch};

const MAX_CROP_DRAWS: usize = 16;

/// Eval-mode outputs `[N, T]` of frozen branches, per utterance.
type FeatureCache = BTreeMap<VisualBranch, BTreeMap<String, Tensor>>;

fn rng_for(seed: u64, tag: &str, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stable_seed(seed, tag, &index.to_string()))
}

fn optimizer(schedule: &TrainSchedule) -> Adam {
    Adam::new(if schedule.grad_clip > 0.0 { Some(schedule.grad_clip as f32) } else { None })
}

fn require_variant(model: &SeparationModel, want: ModelVariant) -> Result<()> {
    if model.variant() != want {
        return Err(Error::VariantConstraint(format!("expected a {want} model, got {}", model.variant())));
    }
    Ok(())
}

fn require_dataset(d: &Dataset, want: DatasetVariant, role: &str) -> Result<()> {
    if d.variant != want {
        return Err(Error::VariantConstraint(format!("{role} set must be {want}, got {}", d.variant)));
    }
    Ok(())
}

fn build_cache(
    model: &SeparationModel,
    corpus: &Corpus,
    branches: &[VisualBranch],
    utts: &BTreeSet<String>,
    workers: usize,
) -> Result<FeatureCache> {
    let ids: Vec<&String> = utts.iter().collect();
    let mut cache = FeatureCache::new();
    for &branch in branches {
        let feats = map_indexed(ids.len(), workers, |i| -> Result<Tensor> {
            let u = corpus.utterance(ids[i]).ok_or_else(|| Error::Config(format!("unknown utterance {}", ids[i])))?;
            let e = model.visual_frontend(&u.video, branch)?;
            let (l, n) = (e.len(), e.dim());
            let mut t = vec![0f32; n * l];
            for (j, row) in e.features.data().chunks(n).enumerate() {
                for (c, &v) in row.iter().enumerate() {
                    t[c * l + j] = v;
                }
            }
            Ok(Tensor::from_vec(&[n, l], t))
        });
        let mut m = BTreeMap::new();
        for (id, f) in ids.iter().zip(feats) {
            m.insert((*id).clone(), f?);
        }
        cache.insert(branch, m);
    }
    Ok(cache)
}

/// Utterances that can appear as visual references of `d`.
fn visual_pool(d: &Dataset, corpus: &Corpus, reshuffled: bool) -> BTreeSet<String> {
    let mut out: BTreeSet<String> = d.examples.iter().map(|e| e.visual_utt.clone()).collect();
    if reshuffled {
        let speakers: BTreeSet<&str> =
            d.examples.iter().filter_map(|e| corpus.record(&e.target_utt)).map(|r| r.speaker_id.as_str()).collect();
        for r in &corpus.manifest.records {
            if speakers.contains(r.speaker_id.as_str()) {
                out.insert(r.utt_id.clone());
            }
        }
    }
    out
}

struct Batch {
    mixture: Tensor,
    targets: Vec<Vec<f32>>,
    video: Option<Tensor>,
    features: BranchFeatures,
}

/// Stacks equally long examples. `starts` holds each example's first frame
/// within its uncropped visual stream (for cached features).
fn assemble(model: &SeparationModel, examples: &[(MixtureExample, usize)], cache: &FeatureCache) -> Result<Batch> {
    let n = examples[0].0.len();
    if examples.iter().any(|(e, _)| e.len() != n) {
        return Err(Error::Shape("batch examples differ in length".into()));
    }
    let mut mix = Vec::with_capacity(examples.len() * n);
    for (e, _) in examples {
        mix.extend_from_slice(e.mixture.samples());
    }
    let frames = examples[0].0.visual.n_frames();
    let mut features = BranchFeatures::new();
    for (&branch, per_utt) in cache {
        let dim = model.config.branch_dim(branch);
        let mut data = vec![0f32; examples.len() * dim * frames];
        for (b, (e, start)) in examples.iter().enumerate() {
            let f = per_utt
                .get(&e.visual_utt_id)
                .ok_or_else(|| Error::State(format!("no cached features for {}", e.visual_utt_id)))?;
            let l = f.dim(1);
            for c in 0..dim {
                for j in 0..frames {
                    data[(b * dim + c) * frames + j] = f.data()[c * l + (start + j) % l];
                }
            }
        }
        features.insert(branch, Tensor::from_vec(&[examples.len(), dim, frames], data));
    }
    let needs_video = model.variant().branches().iter().any(|b| !cache.contains_key(b));
    let video = if needs_video {
        let refs: Vec<_> = examples.iter().map(|(e, _)| &e.visual).collect();
        Some(model.video_tensor(&refs)?)
    } else {
        None
    };
    Ok(Batch {
        mixture: Tensor::from_vec(&[examples.len(), n], mix),
        targets: examples.iter().map(|(e, _)| e.target.samples().to_vec()).collect(),
        video,
        features,
    })
}

fn separation_loss(model: &SeparationModel, batch: &Batch, training: bool) -> Result<(f64, Graph, Option<(crate::nn::Var, Tensor)>)> {
    let mut g = Graph::new(training);
    let v = model.visual_graph(&mut g, batch.video.as_ref(), &batch.features)?;
    let out = model.extract_graph(&mut g, &batch.mixture, v, MaskMode::Learned)?;
    let est = g.value(out.estimate);
    let (bsz, n) = (est.dim(0), est.dim(1));
    let mut total = 0.0;
    let mut grad = vec![0f32; bsz * n];
    for b in 0..bsz {
        let (l, gr) = si_snr_loss_grad(&batch.targets[b], &est.data()[b * n..(b + 1) * n], SiSnrOptions::default())?;
        total += l;
        for (d, s) in grad[b * n..(b + 1) * n].iter_mut().zip(gr) {
            *d = (s / bsz as f64) as f32;
        }
    }
    let seed = training.then(|| (out.estimate, Tensor::from_vec(&[bsz, n], grad)));
    Ok((total / bsz as f64, g, seed))
}

fn apply_step(model: &mut SeparationModel, opt: &mut Adam, mut g: Graph, seed: (crate::nn::Var, Tensor), lr: f64, momentum: f64) {
    g.backward(seed.0, seed.1);
    let updates = g.take_bn_updates();
    model.params.apply_bn_updates(updates, momentum as f32);
    let grads = g.param_grads();
    opt.step(&mut model.params, &grads, lr as f32);
    model.training_step += 1;
}

fn validate_separation(
    model: &SeparationModel,
    dev: &Dataset,
    corpus: &Corpus,
    cache: &FeatureCache,
    schedule: &TrainSchedule,
) -> Result<f64> {
    let n = if schedule.val_examples == 0 { dev.len() } else { schedule.val_examples.min(dev.len()) };
    if n == 0 {
        return Err(Error::Config("empty dev set".into()));
    }
    let losses = map_indexed(n, schedule.workers, |i| -> Result<f64> {
        let ex = dev.render(i, corpus)?;
        let batch = assemble(model, &[(ex, 0)], cache)?;
        Ok(separation_loss(model, &batch, false)?.0)
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / n as f64)
}

fn audit_batch(audit: &mut BatchAudit, examples: &[(MixtureExample, usize)], guard: DatasetVariant) -> Result<()> {
    audit.batches += 1;
    audit.examples += examples.len();
    let aligned = examples.iter().any(|(e, _)| e.visual_utt_id == e.target_utt_id);
    let cross = examples.iter().any(|(e, _)| e.target_speaker_id != e.interferer_speaker_id);
    audit.aligned_visual_batches += usize::from(aligned);
    audit.cross_speaker_batches += usize::from(cross);
    match guard {
        DatasetVariant::Dssv if aligned => {
            Err(Error::VariantConstraint("dssv batch contains a time-aligned visual stream".into()))
        }
        DatasetVariant::Ssav if cross => Err(Error::VariantConstraint("ssav batch mixes two speakers".into())),
        _ => Ok(()),
    }
}

struct SeparationRun<'a> {
    procedure: &'static str,
    corpus: &'a Corpus,
    train: &'a Dataset,
    dev: &'a Dataset,
    /// Split of the training set, for dssv reshuffles.
    reshuffle: Option<Split>,
    cached: Vec<VisualBranch>,
}

fn run_separation(model: &mut SeparationModel, schedule: &TrainSchedule, run: SeparationRun<'_>) -> Result<TrainLog> {
    let started = Instant::now();
    schedule.validate()?;
    if run.train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut pool = visual_pool(run.train, run.corpus, run.reshuffle.is_some());
    pool.extend(visual_pool(run.dev, run.corpus, false));
    let cache = if run.cached.is_empty() {
        FeatureCache::new()
    } else {
        build_cache(model, run.corpus, &run.cached, &pool, schedule.workers)?
    };
    let mut opt = optimizer(schedule);
    let mut tracker = PlateauTracker::new(schedule);
    let mut audit = BatchAudit::default();
    let mut epochs = Vec::new();
    let mut best: Option<(ParamStore, usize)> = None;
    let start_step = model.training_step;
    let stop_reason;
    loop {
        let epoch = epochs.len() + 1;
        let t0 = Instant::now();
        let data = match run.reshuffle {
            Some(split) => {
                run.train.reshuffle_epoch(&run.corpus.manifest, split, stable_seed(schedule.seed, "reshuffle", &epoch.to_string()))?
            }
            None => run.train.clone(),
        };
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng_for(schedule.seed, "order", epoch));
        let lr = tracker.lr();
        let mut train_total = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(schedule.batch_size).enumerate() {
            let examples = map_indexed(chunk.len(), schedule.workers, |k| -> Result<(MixtureExample, usize)> {
                let ex = data.render(chunk[k], run.corpus)?;
                let frames = ex.visual.n_frames();
                let len = schedule.crop_frames.min(frames);
                let mut rng = rng_for(schedule.seed, &format!("crop:{epoch}"), bi * schedule.batch_size + k);
                // Redraw excerpts in which the target is (nearly) silent.
                let floor = 1e-3 * ex.target.power();
                let mut start = rng.random_range(0..=frames - len);
                for _ in 0..MAX_CROP_DRAWS {
                    if ex.crop(start, len)?.target.power() > floor {
                        break;
                    }
                    start = rng.random_range(0..=frames - len);
                }
                Ok((ex.crop(start, len)?, start))
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            audit_batch(&mut audit, &examples, run.train.variant)?;
            let batch = assemble(model, &examples, &cache)?;
            let (loss, g, seed) = separation_loss(model, &batch, true)?;
            apply_step(model, &mut opt, g, seed.expect("training graph"), lr, schedule.bn_momentum);
            train_total += loss;
            batches += 1;
        }
        let val_loss = validate_separation(model, run.dev, run.corpus, &cache, schedule)?;
        let (improved, stop) = tracker.observe(val_loss);
        if improved {
            best = Some((model.params.clone(), epoch));
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: train_total / batches as f64,
            val_loss,
            lr,
            epoch_time_s: t0.elapsed().as_secs_f64(),
        });
        if let Some(r) = stop {
            stop_reason = r;
            break;
        }
    }
    let best_epoch = match best {
        Some((params, epoch)) => {
            model.params = params;
            epoch
        }
        None => epochs.len(),
    };
    Ok(TrainLog {
        variant: model.variant(),
        procedure: run.procedure.to_string(),
        best_val_loss: tracker.best(),
        epochs,
        best_epoch,
        stop_reason,
        steps: model.training_step - start_step,
        audit,
        wall_time_s: started.elapsed().as_secs_f64(),
        checkpoint: None,
    })
}

fn split_of(d: &Dataset, corpus: &Corpus) -> Result<Split> {
    let first = d.examples.first().ok_or_else(|| Error::Config("empty dataset".into()))?;
    corpus
        .record(&first.target_utt)
        .map(|r| r.split)
        .ok_or_else(|| Error::Config(format!("utterance {} is not in the corpus", first.target_utt)))
}

/// Joint-branch model on different-speaker mixtures with aligned visuals.
pub fn train_baseline(
    model: &mut SeparationModel,
    train: &Dataset,
    dev: &Dataset,
    corpus: &Corpus,
    schedule: &TrainSchedule,
) -> Result<TrainLog> {
    require_variant(model, ModelVariant::Baseline)?;
    require_dataset(train, DatasetVariant::Dsav, "training")?;
    require_dataset(dev, DatasetVariant::Dsav, "dev")?;
    let run = SeparationRun { procedure: "baseline", corpus, train, dev, reshuffle: None, cached: vec![] };
    run_separation(model, schedule, run)
}

/// Sync-branch model on same-speaker mixtures with aligned visuals.
pub fn train_sync(
    model: &mut SeparationModel,
    train: &Dataset,
    dev: &Dataset,
    corpus: &Corpus,
    schedule: &TrainSchedule,
) -> Result<TrainLog> {
    require_variant(model, ModelVariant::Sync)?;
    require_dataset(train, DatasetVariant::Ssav, "training")?;
    require_dataset(dev, DatasetVariant::Ssav, "dev")?;
    let run = SeparationRun { procedure: "sync", corpus, train, dev, reshuffle: None, cached: vec![] };
    run_separation(model, schedule, run)
}

/// Second spk stage: frozen identity branch, extraction trained on
/// different-speaker mixtures whose visuals are reshuffled every epoch.
pub fn train_spk_step2(
    model: &mut SeparationModel,
    train: &Dataset,
    dev: &Dataset,
    corpus: &Corpus,
    schedule: &TrainSchedule,
) -> Result<TrainLog> {
    require_variant(model, ModelVariant::Spk)?;
    if !model.params.is_frozen(VisualBranch::Identity.group()) {
        return Err(Error::State("spk step 2 needs a pretrained, frozen identity extractor (run step 1 first)".into()));
    }
    require_dataset(train, DatasetVariant::Dssv, "training")?;
    require_dataset(dev, DatasetVariant::Dssv, "dev")?;
    let split = split_of(train, corpus)?;
    let frozen = frozen_snapshot(model);
    let run = SeparationRun {
        procedure: "spk_step2",
        corpus,
        train,
        dev,
        reshuffle: Some(split),
        cached: vec![VisualBranch::Identity],
    };
    let log = run_separation(model, schedule, run)?;
    check_frozen(model, &frozen)?;
    Ok(log)
}

/// Fused model: both branches loaded from pretrained models and frozen.
pub fn train_davse(
    model: &mut SeparationModel,
    train: &Dataset,
    dev: &Dataset,
    corpus: &Corpus,
    schedule: &TrainSchedule,
    spk: Option<&SeparationModel>,
    sync: Option<&SeparationModel>,
) -> Result<TrainLog> {
    require_variant(model, ModelVariant::Davse)?;
    require_dataset(train, DatasetVariant::Dsav, "training")?;
    require_dataset(dev, DatasetVariant::Dsav, "dev")?;
    let spk = spk.ok_or_else(|| Error::Checkpoint("davse training needs the spk checkpoint".into()))?;
    let sync = sync.ok_or_else(|| Error::Checkpoint("davse training needs the sync checkpoint".into()))?;
    if spk.variant() != ModelVariant::Spk || sync.variant() != ModelVariant::Sync {
        return Err(Error::Checkpoint(format!(
            "pretrained models must be spk and sync, got {} and {}",
            spk.variant(),
            sync.variant()
        )));
    }
    model.load_branch_from(spk, VisualBranch::Identity)?;
    model.load_branch_from(sync, VisualBranch::Sync)?;
    model.freeze_branches();
    let frozen = frozen_snapshot(model);
    let run = SeparationRun {
        procedure: "davse",
        corpus,
        train,
        dev,
        reshuffle: None,
        cached: vec![VisualBranch::Identity, VisualBranch::Sync],
    };
    let log = run_separation(model, schedule, run)?;
    check_frozen(model, &frozen)?;
    Ok(log)
}

fn frozen_snapshot(model: &SeparationModel) -> Vec<(String, Tensor)> {
    model
        .params
        .entries()
        .iter()
        .filter(|e| model.params.is_frozen(&e.group))
        .map(|e| (e.name.clone(), e.value.clone()))
        .collect()
}

fn check_frozen(model: &SeparationModel, snapshot: &[(String, Tensor)]) -> Result<()> {
    for (name, value) in snapshot {
        let id = model.params.id(name).ok_or_else(|| Error::State(format!("parameter {name} vanished")))?;
        if !model.params.value(id).bit_eq(value) {
            return Err(Error::State(format!("frozen parameter {name} changed during training")));
        }
    }
    Ok(())
}

/// Speaker labels and the held-out utterances used to score identity
/// classification: the last tenth (at least one) of each training speaker's
/// utterances.
#[derive(Clone, Debug)]
pub struct Step1Partition {
    pub speakers: Vec<String>,
    pub train: Vec<(String, usize)>,
    pub heldout: Vec<(String, usize)>,
}

pub fn step1_partition(corpus: &Corpus) -> Step1Partition {
    let mut by_speaker: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in corpus.manifest.split(Split::Train) {
        by_speaker.entry(&r.speaker_id).or_default().push(&r.utt_id);
    }
    let mut p = Step1Partition { speakers: Vec::new(), train: Vec::new(), heldout: Vec::new() };
    for (label, (spk, mut utts)) in by_speaker.into_iter().enumerate() {
        utts.sort();
        let hold = (utts.len() / 10).max(1).min(utts.len() - 1);
        let cut = utts.len() - hold;
        p.speakers.push(spk.to_string());
        p.train.extend(utts[..cut].iter().map(|u| (u.to_string(), label)));
        p.heldout.extend(utts[cut..].iter().map(|u| (u.to_string(), label)));
    }
    p
}

fn step1_eval(model: &SeparationModel, corpus: &Corpus, utts: &[(String, usize)], workers: usize) -> Result<(f64, f64)> {
    let c = model.n_classes;
    let per = map_indexed(utts.len(), workers, |i| -> Result<(f64, usize, usize)> {
        let (id, label) = &utts[i];
        let u = corpus.utterance(id).ok_or_else(|| Error::Config(format!("unknown utterance {id}")))?;
        let video = model.video_tensor(&[&u.video])?;
        let mut g = Graph::new(false);
        let v = model.branch_graph(&mut g, &video, VisualBranch::Identity)?;
        let logits = model.classifier_graph(&mut g, v)?;
        let lt = frames_by_class(g.value(logits), 0);
        let (loss, _) = ce_loss_grad(&lt, c, *label)?;
        let correct = lt
            .chunks(c)
            .filter(|row| {
                let arg = row.iter().enumerate().fold(0, |m, (k, &v)| if v > row[m] { k } else { m });
                arg == *label
            })
            .count();
        Ok((loss, correct, lt.len() / c))
    });
    let (mut loss, mut correct, mut frames) = (0.0, 0usize, 0usize);
    for p in per {
        let (l, k, f) = p?;
        loss += l;
        correct += k;
        frames += f;
    }
    Ok((loss / utts.len() as f64, correct as f64 / frames as f64))
}

/// `[B, C, T]` logits of batch item `b` as `T × C`.
fn frames_by_class(logits: &Tensor, b: usize) -> Vec<f32> {
    let (c, t) = (logits.dim(1), logits.dim(2));
    let base = &logits.data()[b * c * t..(b + 1) * c * t];
    let mut out = vec![0f32; c * t];
    for k in 0..c {
        for j in 0..t {
            out[j * c + k] = base[k * t + j];
        }
    }
    out
}

/// Frame-level identity accuracy on the held-out utterances of the training speakers.
pub fn identity_accuracy(model: &SeparationModel, corpus: &Corpus, workers: usize) -> Result<f64> {
    require_variant(model, ModelVariant::Spk)?;
    Ok(step1_eval(model, corpus, &step1_partition(corpus).heldout, workers)?.1)
}

/// First spk stage: identity branch and classifier trained with frame-level
/// speaker cross-entropy on single-speaker visual streams. Every other group
/// is left untouched; afterwards the identity branch is frozen.
pub fn train_spk_step1(model: &mut SeparationModel, corpus: &Corpus, schedule: &TrainSchedule) -> Result<TrainLog> {
    require_variant(model, ModelVariant::Spk)?;
    schedule.validate()?;
    let part = step1_partition(corpus);
    if part.speakers.len() != model.n_classes {
        return Err(Error::Config(format!(
            "classifier has {} classes but the corpus has {} training speakers",
            model.n_classes,
            part.speakers.len()
        )));
    }
    let keep = [VisualBranch::Identity.group().to_string(), "classifier".to_string()];
    let parked: Vec<String> = model.params.groups().into_iter().filter(|g| !keep.contains(g) && !model.params.is_frozen(g)).collect();
    model.params.unfreeze(VisualBranch::Identity.group());
    for g in &parked {
        model.params.freeze(g);
    }
    let result = step1_loop(model, corpus, schedule, &part);
    for g in &parked {
        model.params.unfreeze(g);
    }
    model.params.freeze(VisualBranch::Identity.group());
    result
}

fn step1_loop(model: &mut SeparationModel, corpus: &Corpus, schedule: &TrainSchedule, part: &Step1Partition) -> Result<TrainLog> {
    let started = Instant::now();
    let c = model.n_classes;
    let mut opt = optimizer(schedule);
    let mut tracker = PlateauTracker::new(schedule);
    let mut epochs = Vec::new();
    let mut best: Option<(ParamStore, usize)> = None;
    let start_step = model.training_step;
    let mut audit = BatchAudit::default();
    let stop_reason: StopReason;
    loop {
        let epoch = epochs.len() + 1;
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..part.train.len()).collect();
        order.shuffle(&mut rng_for(schedule.seed, "step1-order", epoch));
        let lr = tracker.lr();
        let (mut total, mut batches) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(schedule.batch_size).enumerate() {
            let mut clips = Vec::with_capacity(chunk.len());
            for (k, &i) in chunk.iter().enumerate() {
                let u = corpus.utterance(&part.train[i].0).ok_or_else(|| Error::State("utterance vanished".into()))?;
                let len = schedule.crop_frames.min(u.video.n_frames());
                let mut rng = rng_for(schedule.seed, &format!("step1-crop:{epoch}"), bi * schedule.batch_size + k);
                clips.push(u.video.slice(rng.random_range(0..=u.video.n_frames() - len), len));
            }
            audit.batches += 1;
            audit.examples += clips.len();
            let refs: Vec<_> = clips.iter().collect();
            let video = model.video_tensor(&refs)?;
            let mut g = Graph::new(true);
            let v = model.branch_graph(&mut g, &video, VisualBranch::Identity)?;
            let logits = model.classifier_graph(&mut g, v)?;
            let lv = g.value(logits).clone();
            let (bsz, t) = (lv.dim(0), lv.dim(2));
            let mut grad = vec![0f32; bsz * c * t];
            let mut loss = 0.0;
            for (b, &i) in chunk.iter().enumerate() {
                let (l, gr) = ce_loss_grad(&frames_by_class(&lv, b), c, part.train[i].1)?;
                loss += l / bsz as f64;
                for k in 0..c {
                    for j in 0..t {
                        grad[(b * c + k) * t + j] = (gr[j * c + k] / bsz as f64) as f32;
                    }
                }
            }
            apply_step(model, &mut opt, g, (logits, Tensor::from_vec(&[bsz, c, t], grad)), lr, schedule.bn_momentum);
            total += loss;
            batches += 1;
        }
        let (val_loss, _) = step1_eval(model, corpus, &part.heldout, schedule.workers)?;
        let (improved, stop) = tracker.observe(val_loss);
        if improved {
            best = Some((model.params.clone(), epoch));
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: total / batches.max(1) as f64,
            val_loss,
            lr,
            epoch_time_s: t0.elapsed().as_secs_f64(),
        });
        if let Some(r) = stop {
            stop_reason = r;
            break;
        }
    }
    let best_epoch = match best {
        Some((params, epoch)) => {
            model.params = params;
            epoch
        }
        None => epochs.len(),
    };
    Ok(TrainLog {
        variant: model.variant(),
        procedure: "spk_step1".into(),
        best_val_loss: tracker.best(),
        epochs,
        best_epoch,
        stop_reason,
        steps: model.training_step - start_step,
        audit,
        wall_time_s: started.elapsed().as_secs_f64(),
        checkpoint: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::avcorpus::{build_corpus, CorpusConfig};
    use crate::mixsim::build_dataset;

    #[test]
    fn audit_rejects_forbidden_batches() {
        let c = build_corpus(&CorpusConfig { train_speakers: 4, dev_speakers: 4, test_speakers: 4, utterances_per_speaker: 2, ..Default::default() }).unwrap();
        let dsav = build_dataset(&c.manifest, DatasetVariant::Dsav, Split::Train, 1, 2).unwrap();
        let ssav = build_dataset(&c.manifest, DatasetVariant::Ssav, Split::Train, 1, 2).unwrap();
        let render = |d: &Dataset| -> Vec<(MixtureExample, usize)> { (0..d.len()).map(|i| (d.render(i, &c).unwrap(), 0)).collect() };
        let mut audit = BatchAudit::default();
        assert!(matches!(audit_batch(&mut audit, &render(&dsav), DatasetVariant::Dssv), Err(Error::VariantConstraint(_))));
        assert!(matches!(audit_batch(&mut audit, &render(&dsav), DatasetVariant::Ssav), Err(Error::VariantConstraint(_))));
        audit_batch(&mut audit, &render(&ssav), DatasetVariant::Ssav).unwrap();
        audit_batch(&mut audit, &render(&dsav), DatasetVariant::Dsav).unwrap();
        assert_eq!(audit.batches, 4);
        assert_eq!(audit.aligned_visual_batches, 4);
        assert_eq!(audit.cross_speaker_batches, 3);
    }
}
