//! Acceptance suite. Every check writes one `[PASS]`/`[FAIL]` line to stdout
//! (uncaptured) with the measured values and the pinned tolerance.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use avse_core::avcorpus::{build_corpus, CorpusConfig, Split, VisualField};
use avse_core::cli::pipeline::{prepare_data, run_seed, Layout, SeedOutcome};
use avse_core::cli::{run_report, MultiSeedSummary, RunConfig};
use avse_core::evalkit::median;
use avse_core::mixsim::{build_dataset, DatasetVariant, GroupPair, SIR_RANGE_DB};
use avse_core::sepnet::{SeparationModel, VisualBranch};
use avse_core::trainkit::{ce_loss, identity_accuracy, replay, si_snr, si_snr_loss_grad, si_snr_with, SiSnrOptions, StopReason, TrainSchedule, SI_SNR_EPS};

const METRIC_ORACLE_TOL_DB: f64 = 1e-6;
const SCALE_INVARIANCE_TOL_DB: f64 = 1e-9;
const SCALES: [f64; 3] = [0.1, 1.0, 10.0];
const FD_STEP: f64 = 1e-5;
const GRAD_REL_TOL: f64 = 1e-4;
const SIR_TOL_DB: f64 = 1e-6;
const CE_TOL: f64 = 1e-12;
const STEP1_MIN_ACCURACY: f64 = 0.9;
const STEP1_MAX_EPOCHS: usize = 20;
const STEP1_MAX_SECONDS: f64 = 15.0 * 60.0;
const RUN_MAX_SECONDS: f64 = 45.0 * 60.0;
const SYNC_MATCHED_MIN_DB: f64 = 3.0;
const SYNC_SHUFFLED_MAX_DB: f64 = 0.0;
const SPK_GROUP_GAP_MIN_DB: f64 = 1.0;
const SEEDS: [u64; 3] = [0, 1, 2];
const EMBED_SPEAKERS: usize = 9;

fn report(ok: bool, name: &str, detail: String) -> bool {
    let line = format!("[{}] {name}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    ok
}

/// Direct f64 transcription: mean removal, projection, eps-stabilized ratio.
fn si_snr_oracle(s: &[f64], e: &[f64], eps: f64) -> f64 {
    let n = s.len() as f64;
    let (ms, me) = (s.iter().sum::<f64>() / n, e.iter().sum::<f64>() / n);
    let s: Vec<f64> = s.iter().map(|v| v - ms).collect();
    let e: Vec<f64> = e.iter().map(|v| v - me).collect();
    let alpha = s.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>() / s.iter().map(|a| a * a).sum::<f64>();
    let (mut num, mut den) = (0.0, 0.0);
    for (a, b) in s.iter().zip(&e) {
        num += (alpha * a) * (alpha * a);
        den += (b - alpha * a) * (b - alpha * a);
    }
    10.0 * ((num + eps) / (den + eps)).log10()
}

/// Random (reference, estimate) pairs from pure noise up to near-perfect estimates.
fn random_pairs(n: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(16..2048);
            let s: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (a, b) = (rng.random_range(-2.0..2.0), 10f64.powf(rng.random_range(-3.0..1.0)));
            let e: Vec<f64> = s.iter().map(|v| a * v + b * rng.random_range(-1.0..1.0)).collect();
            (s, e)
        })
        .collect()
}

#[test]
fn metric_oracle_and_scale_invariance() {
    let pairs = random_pairs(1000, 1);
    let mut worst = 0f64;
    let mut worst_f32 = 0f64;
    for (s, e) in &pairs {
        worst = worst.max((si_snr(s, e).unwrap() - si_snr_oracle(s, e, SI_SNR_EPS)).abs());
        let (s32, e32): (Vec<f32>, Vec<f32>) = (s.iter().map(|&v| v as f32).collect(), e.iter().map(|&v| v as f32).collect());
        let (s64, e64): (Vec<f64>, Vec<f64>) = (s32.iter().map(|&v| v as f64).collect(), e32.iter().map(|&v| v as f64).collect());
        worst_f32 = worst_f32.max((si_snr(&s32, &e32).unwrap() - si_snr_oracle(&s64, &e64, SI_SNR_EPS)).abs());
    }
    let oracle_ok = report(
        worst <= METRIC_ORACLE_TOL_DB && worst_f32 <= METRIC_ORACLE_TOL_DB,
        "metric oracle",
        format!("max |si_snr - oracle| = {worst:.2e} dB (f64), {worst_f32:.2e} dB (f32 input) over 1000 pairs, tol {METRIC_ORACLE_TOL_DB:.0e}"),
    );

    // Exact invariance is a property of the projection; the eps = 1e-8
    // stabilizer perturbs it by a bounded amount, checked separately.
    let exact = SiSnrOptions { eps: 0.0, zero_mean: true };
    let (mut drift, mut eps_drift, mut bound_violations) = (0f64, 0f64, 0usize);
    for (s, e) in &pairs {
        let base = si_snr_with(s, e, exact).unwrap().0;
        let (dflt, b) = si_snr_with(s, e, SiSnrOptions::default()).unwrap();
        let st: f64 = b.s_target.iter().map(|v| v * v).sum();
        let en: f64 = b.e_noise.iter().map(|v| v * v).sum();
        for &alpha in &SCALES {
            let scaled: Vec<f64> = e.iter().map(|v| v * alpha).collect();
            drift = drift.max((si_snr_with(s, &scaled, exact).unwrap().0 - base).abs());
            let d = (si_snr(s, &scaled).unwrap() - dflt).abs();
            eps_drift = eps_drift.max(d);
            let bound = 10.0 / std::f64::consts::LN_10 * SI_SNR_EPS * (1.0 / st + 1.0 / en) * (1.0 / (alpha * alpha) - 1.0).abs() * 1.01 + 1e-12;
            bound_violations += usize::from(d > bound);
        }
    }
    let inv_ok = report(
        drift <= SCALE_INVARIANCE_TOL_DB && bound_violations == 0,
        "scale invariance",
        format!(
            "max |si_snr(s, a*e) - si_snr(s, e)| over a in {SCALES:?} = {drift:.2e} dB (eps = 0), tol {SCALE_INVARIANCE_TOL_DB:.0e}; \
             with eps = {SI_SNR_EPS:.0e} max drift {eps_drift:.2e} dB, {bound_violations} pairs above the first-order eps bound"
        ),
    );
    assert!(oracle_ok && inv_ok);
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let opts = SiSnrOptions::default();
    let mut worst = 0f64;
    for _ in 0..20 {
        let n = rng.random_range(16..64);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let e: Vec<f64> = s.iter().map(|v| 0.7 * v + 0.5 * rng.random_range(-1.0..1.0)).collect();
        let (_, g) = si_snr_loss_grad(&s, &e, opts).unwrap();
        let loss = |x: &[f64]| -si_snr_with(&s, x, opts).unwrap().0;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..n {
            let (mut p, mut m) = (e.clone(), e.clone());
            p[i] += FD_STEP;
            m[i] -= FD_STEP;
            let fd = (loss(&p) - loss(&m)) / (2.0 * FD_STEP);
            num += (g[i] - fd).powi(2);
            den += fd * fd;
        }
        worst = worst.max((num / den).sqrt());
    }
    assert!(report(
        worst <= GRAD_REL_TOL,
        "SI-SNR loss gradient",
        format!("max relative error vs central differences (h = {FD_STEP:.0e}) = {worst:.2e} over 20 points, tol {GRAD_REL_TOL:.0e}")
    ));
}

#[test]
fn simulated_sir_is_exact_and_in_range() {
    let corpus = build_corpus(&CorpusConfig::default()).unwrap();
    let mut worst = 0f64;
    let mut out_of_range = 0usize;
    let mut count = 0usize;
    for (variant, pairs) in [(DatasetVariant::Dsav, 400), (DatasetVariant::Dssv, 300), (DatasetVariant::Ssav, 300)] {
        let d = build_dataset(&corpus.manifest, variant, Split::Train, 21, pairs).unwrap();
        for i in 0..d.len() {
            let ex = d.render(i, &corpus).unwrap();
            let pt: f64 = ex.target.samples().iter().map(|&v| (v as f64).powi(2)).sum();
            let pi: f64 = ex.interferer.samples().iter().map(|&v| (v as f64).powi(2)).sum();
            worst = worst.max((10.0 * (pt / pi).log10() - d.examples[i].sir_db).abs());
            out_of_range += usize::from(!(SIR_RANGE_DB.0..=SIR_RANGE_DB.1).contains(&d.examples[i].sir_db));
            count += 1;
        }
    }
    assert!(report(
        worst <= SIR_TOL_DB && out_of_range == 0 && count == 1000,
        "SIR exactness",
        format!("{count} pairs, max |measured - requested| = {worst:.2e} dB (tol {SIR_TOL_DB:.0e}), {out_of_range} requested SIRs outside {SIR_RANGE_DB:?}")
    ));
}

fn trace_oracle(losses: &[f64], halve: usize, stop: usize, max: usize) -> (Vec<f64>, Option<usize>) {
    let (mut lr, mut best, mut stale) = (1e-3, f64::INFINITY, 0usize);
    let mut lrs = Vec::new();
    for (i, &l) in losses.iter().enumerate() {
        let epoch = i + 1;
        lrs.push(lr);
        if l < best {
            best = l;
            stale = 0;
        } else {
            stale += 1;
        }
        if stale >= stop || epoch >= max {
            return (lrs, Some(epoch));
        }
        if stale > 0 && stale % halve == 0 {
            lr /= 2.0;
        }
    }
    (lrs, None)
}

#[test]
fn schedule_traces() {
    let s = TrainSchedule::default();
    let mut ok = true;
    let (lrs, stop) = replay(&s, &[5.0; 10]);
    ok &= lrs == [1e-3, 1e-3, 1e-3, 1e-3, 5e-4, 5e-4, 5e-4] && stop == Some((7, StopReason::Plateau));
    let improving: Vec<f64> = (0..150).map(|i| 100.0 - i as f64).collect();
    let (lrs, stop) = replay(&s, &improving);
    ok &= lrs.len() == 100 && lrs.iter().all(|&l| l == 1e-3) && stop == Some((100, StopReason::MaxEpochs));
    let (lrs, stop) = replay(&s, &[3.0, 2.0, 2.5, 2.5, 2.5, 1.0, 1.5]);
    ok &= lrs == [1e-3, 1e-3, 1e-3, 1e-3, 1e-3, 5e-4, 5e-4] && stop.is_none();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for _ in 0..500 {
        let n = rng.random_range(1..130);
        let trace: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
        let (lrs, stop) = replay(&s, &trace);
        let (olrs, ostop) = trace_oracle(&trace, s.plateau_halve, s.plateau_stop, s.max_epochs);
        mismatches += usize::from(lrs != olrs || stop.map(|x| x.0) != ostop);
    }
    assert!(report(
        ok && mismatches == 0,
        "plateau schedule",
        format!("worked traces {}, {mismatches}/500 random traces differ from the reference rule (halve at 3, stop at 6 or epoch 100)", if ok { "match" } else { "differ" })
    ));
}

const TINY: &str = r#"{
  "corpus": {"train_speakers": 4, "dev_speakers": 4, "test_speakers": 4, "utterances_per_speaker": 2},
  "simulate": {"train_pairs": 6, "dev_pairs": 2, "test_pairs": 4},
  "model": {"n_audio_filters": 16, "visual_dim": 8,
            "tcn": {"bottleneck": 8, "hidden": 16, "blocks_per_repeat": 1, "repeats": 1, "kernel": 3}},
  "train": {"schedule": {"max_epochs": 2, "crop_frames": 10, "val_examples": 2}, "step1_max_epochs": 2},
  "eval": {"embed_speakers": 3}
}"#;

fn files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn pipeline_is_byte_reproducible() {
    let cfg = RunConfig::from_json(TINY).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_report(&cfg, a.path(), &[0], 1).unwrap();
    run_report(&cfg, b.path(), &[0], 2).unwrap();
    let (fa, fb) = (files(a.path()), files(b.path()));
    // Train logs carry wall-clock times and are excluded.
    let compared: Vec<&String> = fa.keys().filter(|k| !k.contains("logs/")).collect();
    let differing: Vec<&&String> = compared.iter().filter(|k| fa.get(**k) != fb.get(**k)).collect();
    let kinds = ["manifest.jsonl", "data/", "report.json", "ckpt/", "embed/"];
    let covered = kinds.iter().all(|k| compared.iter().any(|c| c.contains(k)));
    assert!(report(
        differing.is_empty() && covered && fa.len() == fb.len(),
        "determinism",
        format!("{} artifacts compared (manifests, descriptors, checkpoints, reports, embeddings) across two runs, {} differ {:?}", compared.len(), differing.len(), differing)
    ));
}

struct Desk {
    cfg: RunConfig,
    layout: Layout,
    corpus: avse_core::avcorpus::Corpus,
    outcomes: Vec<SeedOutcome>,
    summary: MultiSeedSummary,
}

fn per_seed_median(d: &Desk, f: impl Fn(&SeedOutcome) -> f64) -> (f64, Vec<f64>) {
    let v: Vec<f64> = d.outcomes.iter().map(f).collect();
    (median(&v), v)
}

fn cell<'a>(o: &'a SeedOutcome, model: &str, field: VisualField, dv: DatasetVariant) -> &'a avse_core::evalkit::EvalCell {
    o.report.cell(model, field.as_str(), dv).expect("cell present")
}

fn stratum(o: &SeedOutcome, model: &str, field: VisualField, gp: GroupPair) -> f64 {
    cell(o, model, field, DatasetVariant::Dsav).stratum(gp).expect("stratum present").si_snri_mean
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(", ")
}

fn check_step1(d: &Desk) -> bool {
    let mut ok = true;
    let mut ce = Vec::new();
    for c in [2usize, 8, 32] {
        let err = (ce_loss(&vec![0.0; 5 * c], c, c - 1).unwrap() - (c as f64).ln()).abs();
        ce.push(err);
        ok &= err <= CE_TOL;
    }
    let mut acc = Vec::new();
    let mut epochs = Vec::new();
    let mut secs = Vec::new();
    for o in &d.outcomes {
        let model = SeparationModel::load(&d.layout.checkpoint(o.seed, "spk")).unwrap();
        acc.push(identity_accuracy(&model, &d.corpus, 1).unwrap());
        let log = &o.logs["spk"][0];
        epochs.push(log.epochs.len());
        secs.push(log.wall_time_s);
    }
    ok &= acc.iter().all(|&a| a >= STEP1_MIN_ACCURACY)
        && epochs.iter().all(|&e| e <= STEP1_MAX_EPOCHS)
        && secs.iter().all(|&s| s <= STEP1_MAX_SECONDS);
    report(
        ok,
        "cross-entropy and identity pretraining",
        format!(
            "uniform-logit max |CE - ln C| = {:.1e} over C in [2, 8, 32] (tol {CE_TOL:.0e}); held-out frame accuracy per seed [{}] (min {STEP1_MIN_ACCURACY}), \
             epochs {epochs:?} (max {STEP1_MAX_EPOCHS}), seconds [{}] (max {STEP1_MAX_SECONDS})",
            ce.iter().copied().fold(0.0, f64::max),
            fmt(&acc),
            fmt(&secs)
        ),
    )
}

fn check_freeze(d: &Desk) -> bool {
    let mut ok = true;
    let mut detail = Vec::new();
    for o in &d.outcomes {
        let davse = SeparationModel::load(&d.layout.checkpoint(o.seed, "davse")).unwrap();
        let mut compared = 0;
        let mut changed = 0;
        for (src, branch) in [("spk", VisualBranch::Identity), ("sync", VisualBranch::Sync)] {
            let source = SeparationModel::load(&d.layout.checkpoint(o.seed, src)).unwrap();
            for e in source.params.entries().iter().filter(|e| e.group == branch.group()) {
                let id = davse.params.id(&e.name).expect("branch parameter present");
                compared += 1;
                changed += usize::from(!davse.params.value(id).bit_eq(&e.value));
            }
        }
        let (t, n) = (davse.params.trainable_count(), davse.params.total_count());
        ok &= compared > 0 && changed == 0 && t < n;
        detail.push(format!("seed {}: {changed}/{compared} frozen tensors changed, trainable {t} < total {n}", o.seed));
    }
    report(ok, "freeze invariance", detail.join("; "))
}

fn check_decoupling(d: &Desk) -> bool {
    let mut ok = true;
    let mut detail = Vec::new();
    for o in &d.outcomes {
        let spk = &o.logs["spk"][1].audit;
        let sync = &o.logs["sync"][0].audit;
        ok &= spk.batches > 0 && spk.aligned_visual_batches == 0 && sync.batches > 0 && sync.cross_speaker_batches == 0;
        detail.push(format!(
            "seed {}: dssv {} aligned of {} batches, ssav {} cross-speaker of {} batches",
            o.seed, spk.aligned_visual_batches, spk.batches, sync.cross_speaker_batches, sync.batches
        ));
    }
    report(ok, "decoupling", detail.join("; "))
}

fn check_ordering(d: &Desk) -> bool {
    use DatasetVariant::*;
    use VisualField::*;
    let face = Face;
    let mut all = true;

    let run_secs: Vec<f64> = d.outcomes.iter().flat_map(|o| o.logs.values().map(|l| l.iter().map(|x| x.wall_time_s).sum::<f64>())).collect();
    let slowest = run_secs.iter().copied().fold(0.0, f64::max);
    all &= report(slowest <= RUN_MAX_SECONDS, "training budget", format!("slowest training run {slowest:.0} s (max {RUN_MAX_SECONDS:.0} s)"));

    let (ssav, ssav_v) = per_seed_median(d, |o| cell(o, "sync", face, Ssav).si_snri_mean);
    let (dssv, dssv_v) = per_seed_median(d, |o| cell(o, "sync", face, Dssv).si_snri_mean);
    all &= report(
        ssav > SYNC_MATCHED_MIN_DB && dssv <= SYNC_SHUFFLED_MAX_DB,
        "sync cue ordering",
        format!("sync SI-SNRi median ssav {ssav:.2} dB [{}] (> {SYNC_MATCHED_MIN_DB}), dssv {dssv:.2} dB [{}] (<= {SYNC_SHUFFLED_MAX_DB})", fmt(&ssav_v), fmt(&dssv_v)),
    );

    let (gap, gap_v) = per_seed_median(d, |o| stratum(o, "spk", face, GroupPair::Diff) - stratum(o, "spk", face, GroupPair::Same));
    all &= report(
        gap >= SPK_GROUP_GAP_MIN_DB,
        "identity cue stratification",
        format!("spk dsav Diff - Same SI-SNRi median {gap:.2} dB [{}] (>= {SPK_GROUP_GAP_MIN_DB})", fmt(&gap_v)),
    );

    let med = |m: &str, f: VisualField| per_seed_median(d, |o| cell(o, m, f, Dsav).si_snri_mean);
    let (davse, davse_v) = med("davse", face);
    let others = [("baseline", med("baseline", face)), ("spk", med("spk", face)), ("sync", med("sync", face))];
    let beaten = others.iter().all(|(_, (m, _))| davse >= *m);
    all &= report(
        beaten,
        "fusion ordering",
        format!(
            "dsav SI-SNRi medians: davse {davse:.2} [{}] vs {}",
            fmt(&davse_v),
            others.iter().map(|(n, (m, v))| format!("{n} {m:.2} [{}]", fmt(v))).collect::<Vec<_>>().join(", ")
        ),
    );

    let (f, f_v) = per_seed_median(d, |o| stratum(o, "spk", Face, GroupPair::Diff));
    let (m, m_v) = per_seed_median(d, |o| stratum(o, "spk", Mouth, GroupPair::Diff));
    all &= report(f >= m, "visual field", format!("spk dsav Diff SI-SNRi median face {f:.2} [{}] vs mouth {m:.2} [{}]", fmt(&f_v), fmt(&m_v)));
    all
}

fn check_embeddings(d: &Desk) -> bool {
    let sil = |name: &str| -> (f64, Vec<f64>) {
        per_seed_median(d, |o| o.viz.iter().find(|v| v.model_variant.as_str() == name).expect("viz summary").frame_silhouette)
    };
    let (davse, dv) = sil("davse");
    let (base, bv) = sil("baseline");
    let speakers: Vec<usize> = d.outcomes.iter().flat_map(|o| o.viz.iter().map(|v| v.speakers)).collect();
    let mut coords = 0usize;
    let mut outside = 0usize;
    for o in &d.outcomes {
        for entry in fs::read_dir(d.layout.embed_dir(o.seed)).unwrap() {
            let p = entry.unwrap().path();
            if p.extension().is_some_and(|e| e == "csv") {
                for line in fs::read_to_string(&p).unwrap().lines().skip(1) {
                    for v in line.split(',').skip(2) {
                        let x: f64 = v.parse().unwrap();
                        coords += 1;
                        outside += usize::from(!(0.0..=1.0).contains(&x));
                    }
                }
            }
        }
    }
    report(
        davse > base && outside == 0 && coords > 0 && speakers.iter().all(|&s| s == EMBED_SPEAKERS),
        "embedding separability",
        format!(
            "frame-level silhouette median davse {davse:.3} [{}] vs baseline {base:.3} [{}]; {outside}/{coords} normalized coordinates outside [0,1]; speakers per dump {speakers:?}",
            fmt(&dv),
            fmt(&bv)
        ),
    )
}

#[test]
fn desk_pipeline_over_three_seeds() {
    let cfg = RunConfig::desk();
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(dir.path());
    let (corpus, datasets) = prepare_data(&cfg, &layout).unwrap();
    let outcomes: Vec<SeedOutcome> = SEEDS.iter().map(|&s| run_seed(&cfg, &layout, &corpus, &datasets, s, 1).unwrap()).collect();
    let summary = MultiSeedSummary::from_outcomes(&outcomes, cfg.digest().unwrap());
    let d = Desk { cfg, layout, corpus, outcomes, summary };
    let _ = std::io::stdout().lock().write_all(d.summary.to_table().as_bytes());
    let ok = [check_step1(&d), check_freeze(&d), check_decoupling(&d), check_ordering(&d), check_embeddings(&d)];
    assert_eq!(d.cfg.eval.embed_speakers, EMBED_SPEAKERS);
    assert!(ok.iter().all(|&b| b), "acceptance checks failed: {ok:?}");
}
