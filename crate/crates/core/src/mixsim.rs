//! Two-speaker, fully overlapped mixtures at exact SIRs, and the three
//! dataset variants built from them.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{mean_square, Waveform};
use crate::avcorpus::{stable_seed, Corpus, CorpusManifest, Group, Split, Utterance, VideoStream};
use crate::error::{Error, Result};

pub const SIR_RANGE_DB: (f64, f64) = (-5.0, 10.0);
pub const PEAK_LIMIT: f32 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetVariant {
    /// Different speakers, aligned visual.
    Dsav,
    /// Different speakers, visual from another utterance of the target speaker.
    Dssv,
    /// Same speaker, aligned visual.
    Ssav,
}

impl DatasetVariant {
    pub const ALL: [DatasetVariant; 3] = [DatasetVariant::Dsav, DatasetVariant::Dssv, DatasetVariant::Ssav];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetVariant::Dsav => "dsav",
            DatasetVariant::Dssv => "dssv",
            DatasetVariant::Ssav => "ssav",
        }
    }
}

impl fmt::Display for DatasetVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dsav" => Ok(DatasetVariant::Dsav),
            "dssv" => Ok(DatasetVariant::Dssv),
            "ssav" => Ok(DatasetVariant::Ssav),
            _ => Err(Error::Config(format!("unknown dataset variant {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupPair {
    Diff,
    Same,
}

impl GroupPair {
    pub fn of(a: Group, b: Group) -> Self {
        if a == b {
            GroupPair::Same
        } else {
            GroupPair::Diff
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GroupPair::Diff => "diff",
            GroupPair::Same => "same",
        }
    }
}

/// How dssv visual references are re-drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualShuffle {
    /// Another utterance of the target speaker.
    #[default]
    SameSpeaker,
    /// A dataset-wide permutation of the target utterances, which may cross
    /// speakers. Only for ablations: it destroys the identity cue too.
    CrossSpeaker,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureExample {
    pub mixture: Waveform,
    pub target: Waveform,
    /// The interferer as it appears in the mixture (SIR-scaled and normalised).
    pub interferer: Waveform,
    pub target_speaker_id: String,
    pub interferer_speaker_id: String,
    pub target_utt_id: String,
    pub visual: VideoStream,
    pub visual_utt_id: String,
    pub sir_db: f64,
    pub variant: DatasetVariant,
    pub group_pair: GroupPair,
}

impl MixtureExample {
    pub fn len(&self) -> usize {
        self.mixture.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixture.is_empty()
    }

    pub fn samples_per_frame(&self) -> usize {
        (self.mixture.sample_rate() / self.visual.fps()) as usize
    }

    /// Frame-aligned excerpt of `n_frames` video frames starting at `start_frame`.
    pub fn crop(&self, start_frame: usize, n_frames: usize) -> Result<Self> {
        let spf = self.samples_per_frame();
        let (a, b) = (start_frame * spf, (start_frame + n_frames) * spf);
        if n_frames == 0 || b > self.len() || start_frame + n_frames > self.visual.n_frames() {
            return Err(Error::Shape(format!(
                "crop of {n_frames} frames at {start_frame} exceeds {} samples",
                self.len()
            )));
        }
        let cut = |w: &Waveform| Waveform::new(w.samples()[a..b].to_vec(), w.sample_rate());
        Ok(Self {
            mixture: cut(&self.mixture)?,
            target: cut(&self.target)?,
            interferer: cut(&self.interferer)?,
            visual: self.visual.slice(start_frame, n_frames),
            ..self.clone()
        })
    }
}

/// `10·log10(P_target / P_interferer)` over the common length.
pub fn measured_sir_db(target: &[f32], interferer: &[f32]) -> f64 {
    let n = target.len().min(interferer.len());
    10.0 * (mean_square(&target[..n]) / mean_square(&interferer[..n])).log10()
}

/// Gain applied to the interferer so that the pair has the requested SIR.
pub fn sir_gain(target: &Waveform, interferer: &Waveform, sir_db: f64) -> Result<f64> {
    let n = target.len().min(interferer.len());
    let pt = mean_square(&target.samples()[..n]);
    let pi = mean_square(&interferer.samples()[..n]);
    if pt <= 0.0 || pi <= 0.0 {
        return Err(Error::ZeroEnergy);
    }
    Ok((pt / (pi * 10f64.powf(sir_db / 10.0))).sqrt())
}

/// Interferer rescaled so that its energy relative to `target`, measured over
/// the overlapped length, gives `sir_db`.
pub fn scale_for_sir(target: &Waveform, interferer: &Waveform, sir_db: f64) -> Result<Waveform> {
    let alpha = sir_gain(target, interferer, sir_db)?;
    let samples = interferer.samples().iter().map(|&s| (s as f64 * alpha) as f32).collect();
    Waveform::new(samples, interferer.sample_rate())
}

fn check_variant(
    target: &Utterance,
    interferer: &Utterance,
    variant: DatasetVariant,
    visual: &Utterance,
    shuffle: VisualShuffle,
) -> Result<()> {
    let fail = |m: &str| Err(Error::VariantConstraint(format!("{variant}: {m}")));
    let same_speaker = target.speaker_id == interferer.speaker_id;
    match variant {
        DatasetVariant::Dsav | DatasetVariant::Dssv if same_speaker => return fail("target and interferer share a speaker"),
        DatasetVariant::Ssav if !same_speaker => return fail("target and interferer speakers differ"),
        DatasetVariant::Ssav if target.utt_id == interferer.utt_id => return fail("target and interferer are one utterance"),
        _ => {}
    }
    match variant {
        DatasetVariant::Dsav | DatasetVariant::Ssav if visual.utt_id != target.utt_id => fail("visual is not the target utterance"),
        DatasetVariant::Dssv if visual.utt_id == target.utt_id => fail("visual is time-aligned with the target"),
        DatasetVariant::Dssv if shuffle == VisualShuffle::SameSpeaker && visual.speaker_id != target.speaker_id => {
            fail("visual belongs to another speaker")
        }
        _ => Ok(()),
    }
}

/// Mixes `target` with `interferer` at `sir_db`, both truncated to the shorter
/// length, with `visual_source` as the visual reference.
pub fn mix_pair(
    target: &Utterance,
    interferer: &Utterance,
    sir_db: f64,
    variant: DatasetVariant,
    visual_source: &Utterance,
) -> Result<MixtureExample> {
    mix_pair_with(target, interferer, sir_db, variant, visual_source, VisualShuffle::SameSpeaker)
}

pub fn mix_pair_with(
    target: &Utterance,
    interferer: &Utterance,
    sir_db: f64,
    variant: DatasetVariant,
    visual_source: &Utterance,
    shuffle: VisualShuffle,
) -> Result<MixtureExample> {
    if !(SIR_RANGE_DB.0..=SIR_RANGE_DB.1).contains(&sir_db) {
        return Err(Error::Config(format!("SIR {sir_db} dB outside [-5, 10]")));
    }
    check_variant(target, interferer, variant, visual_source, shuffle)?;
    let sr = target.audio.sample_rate();
    if interferer.audio.sample_rate() != sr {
        return Err(Error::Shape("sources have different sample rates".into()));
    }
    let n = target.audio.len().min(interferer.audio.len());
    let t = target.audio.truncated(n);
    let alpha = sir_gain(&t, &interferer.audio, sir_db)?;
    let s = t.samples();
    let i: Vec<f64> = interferer.audio.samples()[..n].iter().map(|&x| x as f64 * alpha).collect();
    let peak = s.iter().zip(&i).fold(0f64, |m, (&a, &b)| m.max((a as f64 + b).abs()).max((a as f64).abs()));
    let g = if peak > PEAK_LIMIT as f64 { PEAK_LIMIT as f64 / peak } else { 1.0 };
    let target_out: Vec<f32> = s.iter().map(|&a| (a as f64 * g) as f32).collect();
    let interferer_out: Vec<f32> = i.iter().map(|&b| (b * g) as f32).collect();
    let mixture: Vec<f32> = target_out.iter().zip(&interferer_out).map(|(a, b)| a + b).collect();

    let spf = (sr / visual_source.video.fps()) as usize;
    let visual = loop_frames(&visual_source.video, n.div_ceil(spf));
    Ok(MixtureExample {
        mixture: Waveform::new(mixture, sr)?,
        target: Waveform::new(target_out, sr)?,
        interferer: Waveform::new(interferer_out, sr)?,
        target_speaker_id: target.speaker_id.clone(),
        interferer_speaker_id: interferer.speaker_id.clone(),
        target_utt_id: target.utt_id.clone(),
        visual,
        visual_utt_id: visual_source.utt_id.clone(),
        sir_db,
        variant,
        group_pair: GroupPair::of(target.group, interferer.group),
    })
}

/// First `n` frames of `video`, wrapping around if it is shorter.
fn loop_frames(video: &VideoStream, n: usize) -> VideoStream {
    if n <= video.n_frames() {
        return video.slice(0, n);
    }
    let px = video.size() * video.size();
    let mut frames = Vec::with_capacity(n * px);
    for t in 0..n {
        frames.extend_from_slice(video.frame(t % video.n_frames()));
    }
    VideoStream::new(frames, n, video.size(), video.fps(), video.field()).expect("consistent frame layout")
}

/// One descriptor line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub variant: DatasetVariant,
    pub target_utt: String,
    pub interferer_utt: String,
    pub visual_utt: String,
    pub sir_db: f64,
    pub group_pair: GroupPair,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub variant: DatasetVariant,
    pub shuffle: VisualShuffle,
    pub examples: Vec<MixtureSpec>,
}

struct SplitIndex<'a> {
    utts: Vec<&'a str>,
    speaker_of: BTreeMap<&'a str, (&'a str, Group)>,
    by_speaker: BTreeMap<&'a str, Vec<&'a str>>,
}

impl<'a> SplitIndex<'a> {
    fn new(manifest: &'a CorpusManifest, split: Split) -> Self {
        let mut idx = SplitIndex { utts: Vec::new(), speaker_of: BTreeMap::new(), by_speaker: BTreeMap::new() };
        for r in manifest.split(split) {
            idx.utts.push(&r.utt_id);
            idx.speaker_of.insert(&r.utt_id, (&r.speaker_id, r.group));
            idx.by_speaker.entry(&r.speaker_id).or_default().push(&r.utt_id);
        }
        idx
    }

    fn speaker(&self, utt: &str) -> Result<(&'a str, Group)> {
        self.speaker_of
            .get(utt)
            .copied()
            .ok_or_else(|| Error::Config(format!("utterance {utt} is not in the split")))
    }

    fn other_utt(&self, utt: &str, rng: &mut ChaCha8Rng) -> Result<String> {
        let (spk, _) = self.speaker(utt)?;
        let pool: Vec<&str> = self.by_speaker[spk].iter().copied().filter(|u| *u != utt).collect();
        if pool.is_empty() {
            return Err(Error::Config(format!("speaker {spk} has a single utterance")));
        }
        Ok(pool[rng.random_range(0..pool.len())].to_string())
    }
}

fn pair_rng(seed: u64, tag: &str, i: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stable_seed(seed, tag, &i.to_string()))
}

/// Samples `pairs` mixture descriptors from one split. Every example is a
/// function of `(manifest, variant, split, seed, index)` only.
pub fn build_dataset(
    manifest: &CorpusManifest,
    variant: DatasetVariant,
    split: Split,
    seed: u64,
    pairs: usize,
) -> Result<Dataset> {
    build_dataset_with(manifest, variant, split, seed, pairs, VisualShuffle::SameSpeaker)
}

pub fn build_dataset_with(
    manifest: &CorpusManifest,
    variant: DatasetVariant,
    split: Split,
    seed: u64,
    pairs: usize,
    shuffle: VisualShuffle,
) -> Result<Dataset> {
    let idx = SplitIndex::new(manifest, split);
    if idx.by_speaker.len() < 2 {
        return Err(Error::Config(format!("{} split needs at least two speakers", split.as_str())));
    }
    if variant != DatasetVariant::Dsav {
        if let Some((spk, _)) = idx.by_speaker.iter().find(|(_, u)| u.len() < 2) {
            return Err(Error::Config(format!("{variant} needs two utterances per speaker; {spk} has one")));
        }
    }
    let tag = format!("{variant}:{}", split.as_str());
    let mut examples = Vec::with_capacity(pairs);
    for i in 0..pairs {
        let mut rng = pair_rng(seed, &tag, i);
        let target = idx.utts[rng.random_range(0..idx.utts.len())];
        let (t_spk, t_group) = idx.speaker(target)?;
        let interferer = match variant {
            DatasetVariant::Ssav => idx.other_utt(target, &mut rng)?,
            _ => {
                let pool: Vec<&str> = idx.utts.iter().copied().filter(|u| idx.speaker_of[u].0 != t_spk).collect();
                pool[rng.random_range(0..pool.len())].to_string()
            }
        };
        let (_, i_group) = idx.speaker(&interferer)?;
        let sir_db = rng.random_range(SIR_RANGE_DB.0..=SIR_RANGE_DB.1);
        examples.push(MixtureSpec {
            variant,
            target_utt: target.to_string(),
            interferer_utt: interferer,
            visual_utt: target.to_string(),
            sir_db,
            group_pair: GroupPair::of(t_group, i_group),
        });
    }
    let dataset = Dataset { variant, shuffle, examples };
    match variant {
        DatasetVariant::Dssv => dataset.reassign_visuals(&idx, seed),
        _ => Ok(dataset),
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Redraws every visual reference of a dssv dataset from `epoch_seed`;
    /// audio is left untouched.
    pub fn reshuffle_epoch(&self, manifest: &CorpusManifest, split: Split, epoch_seed: u64) -> Result<Self> {
        if self.variant != DatasetVariant::Dssv {
            return Err(Error::VariantConstraint(format!("cannot reshuffle visuals of a {} dataset", self.variant)));
        }
        self.reassign_visuals(&SplitIndex::new(manifest, split), epoch_seed)
    }

    fn reassign_visuals(&self, idx: &SplitIndex<'_>, epoch_seed: u64) -> Result<Self> {
        let mut out = self.clone();
        match self.shuffle {
            VisualShuffle::SameSpeaker => {
                for (i, ex) in out.examples.iter_mut().enumerate() {
                    let mut rng = pair_rng(epoch_seed, "visual", i);
                    ex.visual_utt = idx.other_utt(&ex.target_utt, &mut rng)?;
                }
            }
            VisualShuffle::CrossSpeaker => {
                let n = out.examples.len();
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(stable_seed(epoch_seed, "visual", "perm")));
                for i in 0..n {
                    if out.examples[perm[i]].target_utt == out.examples[i].target_utt {
                        if let Some(j) = (0..n).find(|&j| {
                            out.examples[perm[j]].target_utt != out.examples[i].target_utt
                                && out.examples[perm[i]].target_utt != out.examples[j].target_utt
                        }) {
                            perm.swap(i, j);
                        }
                    }
                }
                let targets: Vec<String> = out.examples.iter().map(|e| e.target_utt.clone()).collect();
                for (i, ex) in out.examples.iter_mut().enumerate() {
                    ex.visual_utt = targets[perm[i]].clone();
                    if ex.visual_utt == ex.target_utt {
                        let mut rng = pair_rng(epoch_seed, "visual", i);
                        ex.visual_utt = idx.other_utt(&ex.target_utt, &mut rng)?;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Renders example `i` from corpus audio and video.
    pub fn render(&self, i: usize, corpus: &Corpus) -> Result<MixtureExample> {
        render_spec(&self.examples[i], corpus, self.shuffle)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for e in &self.examples {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        Ok(s)
    }

    /// Parses a descriptor. An empty descriptor needs `variant` to be given.
    pub fn from_jsonl(text: &str, variant: Option<DatasetVariant>) -> Result<Self> {
        let examples: Vec<MixtureSpec> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        let variant = match (variant, examples.first()) {
            (Some(v), _) => v,
            (None, Some(e)) => e.variant,
            (None, None) => return Err(Error::Config("empty descriptor without a variant".into())),
        };
        if let Some(e) = examples.iter().find(|e| e.variant != variant) {
            return Err(Error::Config(format!("descriptor mixes variants {} and {}", variant, e.variant)));
        }
        Ok(Self { variant, shuffle: VisualShuffle::SameSpeaker, examples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_jsonl(&fs::read_to_string(path)?, None)
    }

    /// Writes `mix_XXXXX.wav` and `tgt_XXXXX.wav` for every example.
    pub fn materialize(&self, corpus: &Corpus, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for i in 0..self.len() {
            let ex = self.render(i, corpus)?;
            ex.mixture.write_wav(&dir.join(format!("mix_{i:05}.wav")))?;
            ex.target.write_wav(&dir.join(format!("tgt_{i:05}.wav")))?;
        }
        Ok(())
    }
}

pub fn render_spec(spec: &MixtureSpec, corpus: &Corpus, shuffle: VisualShuffle) -> Result<MixtureExample> {
    let get = |u: &str| corpus.utterance(u).ok_or_else(|| Error::Config(format!("utterance {u} is not in the corpus")));
    mix_pair_with(get(&spec.target_utt)?, get(&spec.interferer_utt)?, spec.sir_db, spec.variant, get(&spec.visual_utt)?, shuffle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::avcorpus::{build_corpus, CorpusConfig};
    use proptest::prelude::*;
    use std::sync::OnceLock;

    fn corpus() -> &'static Corpus {
        static C: OnceLock<Corpus> = OnceLock::new();
        C.get_or_init(|| {
            build_corpus(&CorpusConfig {
                train_speakers: 4,
                dev_speakers: 4,
                test_speakers: 4,
                utterances_per_speaker: 3,
                ..Default::default()
            })
            .unwrap()
        })
    }

    fn wave(v: Vec<f32>) -> Waveform {
        Waveform::new(v, 8000).unwrap()
    }

    #[test]
    fn closed_form_gains() {
        let a = wave(vec![0.5, -0.5, 0.5, -0.5]);
        let b = wave(vec![-0.5, 0.5, 0.5, -0.5]);
        assert!((sir_gain(&a, &b, 0.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((sir_gain(&a, &b, 10.0).unwrap() - 0.316_227_766_016_838).abs() < 1e-12);
        assert!((sir_gain(&a, &b, -5.0).unwrap() - 1.778_279_410_038_923).abs() < 1e-12);
        assert!(matches!(scale_for_sir(&a, &wave(vec![0.0; 4]), 0.0), Err(Error::ZeroEnergy)));
    }

    #[test]
    fn mixture_truncates_to_shorter_source() {
        let c = corpus();
        let t = &c.utterances[0];
        let i = c.utterances.iter().find(|u| u.speaker_id != t.speaker_id && u.audio.len() != t.audio.len()).unwrap();
        let ex = mix_pair(t, i, 3.0, DatasetVariant::Dsav, t).unwrap();
        let n = t.audio.len().min(i.audio.len());
        assert_eq!(ex.mixture.len(), n);
        assert_eq!(ex.target.len(), n);
        assert_eq!(ex.visual.n_frames() * ex.samples_per_frame(), n);
        assert!((measured_sir_db(ex.target.samples(), ex.interferer.samples()) - 3.0).abs() < 1e-6);
        assert!(ex.mixture.peak() <= PEAK_LIMIT);
    }

    #[test]
    fn variant_constraints_are_enforced() {
        let c = corpus();
        let t = &c.utterances[0];
        let same_spk = &c.utterances[1];
        assert_eq!(t.speaker_id, same_spk.speaker_id);
        assert!(matches!(mix_pair(t, t, 0.0, DatasetVariant::Dsav, t), Err(Error::VariantConstraint(_))));
        assert!(matches!(mix_pair(t, same_spk, 0.0, DatasetVariant::Dsav, t), Err(Error::VariantConstraint(_))));
        assert!(matches!(mix_pair(t, t, 0.0, DatasetVariant::Ssav, t), Err(Error::VariantConstraint(_))));
        let other = c.utterances.iter().find(|u| u.speaker_id != t.speaker_id).unwrap();
        assert!(matches!(mix_pair(t, other, 0.0, DatasetVariant::Dssv, t), Err(Error::VariantConstraint(_))));
        assert!(matches!(mix_pair(t, other, 0.0, DatasetVariant::Dssv, other), Err(Error::VariantConstraint(_))));
        assert!(mix_pair(t, other, 0.0, DatasetVariant::Dssv, same_spk).is_ok());
        assert!(matches!(mix_pair(t, other, 10.5, DatasetVariant::Dsav, t), Err(Error::Config(_))));
    }

    #[test]
    fn dataset_invariants() {
        let c = corpus();
        let m = &c.manifest;
        let ssav = build_dataset(m, DatasetVariant::Ssav, Split::Train, 1, 200).unwrap();
        for e in &ssav.examples {
            assert_eq!(&e.target_utt[..6], &e.interferer_utt[..6]);
            assert_ne!(e.target_utt, e.interferer_utt);
            assert_eq!(e.group_pair, GroupPair::Same);
        }
        let dssv = build_dataset(m, DatasetVariant::Dssv, Split::Train, 1, 200).unwrap();
        for e in &dssv.examples {
            assert_ne!(e.visual_utt, e.target_utt);
            assert_eq!(c.record(&e.visual_utt).unwrap().speaker_id, c.record(&e.target_utt).unwrap().speaker_id);
        }
        let dsav = build_dataset(m, DatasetVariant::Dsav, Split::Test, 1, 400).unwrap();
        assert!(dsav.examples.iter().all(|e| e.visual_utt == e.target_utt));
        let diff = dsav.examples.iter().filter(|e| e.group_pair == GroupPair::Diff).count();
        assert!(diff > 100 && diff < 350);
        let sirs: Vec<f64> = dsav.examples.iter().map(|e| e.sir_db).collect();
        assert!(sirs.iter().all(|s| (-5.0..=10.0).contains(s)));
        assert!(sirs.iter().any(|&s| s < -4.0) && sirs.iter().any(|&s| s > 9.0));
    }

    #[test]
    fn reshuffle_changes_visuals_but_not_audio() {
        let c = corpus();
        let m = &c.manifest;
        let d = build_dataset(m, DatasetVariant::Dssv, Split::Train, 3, 50).unwrap();
        let a = d.reshuffle_epoch(m, Split::Train, 11).unwrap();
        let b = d.reshuffle_epoch(m, Split::Train, 12).unwrap();
        assert_eq!(a, d.reshuffle_epoch(m, Split::Train, 11).unwrap());
        assert!(a.examples.iter().zip(&b.examples).any(|(x, y)| x.visual_utt != y.visual_utt));
        for (x, y) in a.examples.iter().zip(&d.examples) {
            assert_eq!((&x.target_utt, &x.interferer_utt, x.sir_db), (&y.target_utt, &y.interferer_utt, y.sir_db));
        }
        let dsav = build_dataset(m, DatasetVariant::Dsav, Split::Train, 3, 5).unwrap();
        assert!(matches!(dsav.reshuffle_epoch(m, Split::Train, 1), Err(Error::VariantConstraint(_))));
    }

    #[test]
    fn cross_speaker_shuffle_never_aligns() {
        let c = corpus();
        let d = build_dataset_with(&c.manifest, DatasetVariant::Dssv, Split::Train, 3, 60, VisualShuffle::CrossSpeaker).unwrap();
        assert!(d.examples.iter().all(|e| e.visual_utt != e.target_utt));
        assert!(d.examples.iter().any(|e| e.visual_utt[..6] != e.target_utt[..6]));
        for i in 0..4 {
            d.render(i, c).unwrap();
        }
    }

    #[test]
    fn single_utterance_speakers_are_rejected() {
        let mut c = corpus().manifest.clone();
        c.records.retain(|r| r.utt_id.ends_with("u00"));
        assert!(matches!(build_dataset(&c, DatasetVariant::Ssav, Split::Train, 0, 4), Err(Error::Config(_))));
        assert!(build_dataset(&c, DatasetVariant::Dsav, Split::Train, 0, 4).is_ok());
    }

    #[test]
    fn descriptor_round_trip() {
        let c = corpus();
        let d = build_dataset(&c.manifest, DatasetVariant::Dssv, Split::Dev, 5, 20).unwrap();
        let text = d.to_jsonl().unwrap();
        assert_eq!(Dataset::from_jsonl(&text, None).unwrap(), d);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for k in ["variant", "target_utt", "interferer_utt", "visual_utt", "sir_db", "group_pair"] {
            assert!(first.get(k).is_some());
        }
    }

    #[test]
    fn crop_is_frame_aligned() {
        let c = corpus();
        let d = build_dataset(&c.manifest, DatasetVariant::Dsav, Split::Train, 2, 1).unwrap();
        let ex = d.render(0, c).unwrap();
        let cr = ex.crop(10, 50).unwrap();
        assert_eq!(cr.len(), 50 * 320);
        assert_eq!(cr.visual.n_frames(), 50);
        assert_eq!(cr.mixture.samples()[0], ex.mixture.samples()[3200]);
        assert!(ex.crop(ex.visual.n_frames() - 1, 2).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn sir_is_exact_for_any_signals(
            t in proptest::collection::vec(-1.0f32..1.0, 64..256),
            i in proptest::collection::vec(-1.0f32..1.0, 64..256),
            sir in -5.0f64..10.0,
        ) {
            let (tw, iw) = (wave(t), wave(i));
            prop_assume!(tw.power() > 1e-3 && iw.power() > 1e-3);
            let scaled = scale_for_sir(&tw, &iw, sir).unwrap();
            prop_assert!((measured_sir_db(tw.samples(), scaled.samples()) - sir).abs() < 1e-6);
        }
    }
}
