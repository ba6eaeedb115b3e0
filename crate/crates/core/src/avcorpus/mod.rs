//! Synthetic audio-visual corpus with independently controllable cues.
//!
//! Identity lives only in each speaker's static face template (and is
//! correlated with the voice through hair brightness, nose length and eye
//! size). Synchronisation lives only in the mouth, whose opening follows the
//! audio envelope frame by frame and whose width follows the pseudo-phone.

mod seed;
mod speaker;
mod utterance;
mod video;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use seed::{hex_digest, stable_seed};
pub use speaker::{make_speaker, make_speaker_at, speaker_id, Group, SpeakerProfile, N_HARMONICS};
pub use utterance::{aperture_from_audio, synth_utterance, Synthesizer, Utterance, MAX_DURATION_S, MIN_DURATION_S, N_PHONES};
pub use video::{crop_mouth, mouth_box_pixels, VideoStream, VisualField, DEFAULT_FPS, DEFAULT_RESOLUTION, MOUTH_BOX};

use crate::audio::{Waveform, DEFAULT_SAMPLE_RATE};
use crate::container::{NamedTensor, TensorContainer, TensorData};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub train_speakers: usize,
    pub dev_speakers: usize,
    pub test_speakers: usize,
    pub utterances_per_speaker: usize,
    pub sample_rate: u32,
    pub fps: u32,
    pub resolution: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            train_speakers: 32,
            dev_speakers: 8,
            test_speakers: 8,
            utterances_per_speaker: 20,
            sample_rate: DEFAULT_SAMPLE_RATE,
            fps: DEFAULT_FPS,
            resolution: DEFAULT_RESOLUTION,
        }
    }
}

impl CorpusConfig {
    pub fn speakers_in(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_speakers,
            Split::Dev => self.dev_speakers,
            Split::Test => self.test_speakers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.utterances_per_speaker < 2 {
            return Err(Error::Config("utterances_per_speaker must be at least 2".into()));
        }
        for split in Split::ALL {
            if self.speakers_in(split) < 4 {
                return Err(Error::Config(format!(
                    "{} split needs at least 2 speakers per group, got {} speakers",
                    split.as_str(),
                    self.speakers_in(split)
                )));
            }
        }
        if self.fps == 0 || self.sample_rate % self.fps != 0 {
            return Err(Error::Config("sample_rate must be a multiple of fps".into()));
        }
        if self.resolution < 8 {
            return Err(Error::Config("resolution must be at least 8".into()));
        }
        Ok(())
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub speaker_id: String,
    pub utt_id: String,
    pub group: Group,
    pub split: Split,
    pub audio_path: String,
    pub video_path: String,
    pub duration_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub config: CorpusConfig,
    pub counts: BTreeMap<Split, usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub header: CorpusHeader,
    pub records: Vec<UtteranceRecord>,
}

impl CorpusManifest {
    pub fn config(&self) -> &CorpusConfig {
        &self.header.config
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &UtteranceRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn speakers(&self, split: Split) -> BTreeSet<String> {
        self.split(split).map(|r| r.speaker_id.clone()).collect()
    }

    /// JSON-lines body, one record per utterance.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn digest(&self) -> Result<String> {
        Ok(hex_digest(self.to_jsonl()?.as_bytes()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join("manifest.jsonl"), self.to_jsonl()?)?;
        fs::write(dir.join("corpus.json"), serde_json::to_string_pretty(&self.header)? + "\n")?;
        Ok(())
    }

    /// Reads `corpus.json` and `manifest.jsonl` from a corpus directory, or
    /// from the directory containing a given `manifest.jsonl`.
    pub fn load(path: &Path) -> Result<Self> {
        let dir = if path.is_dir() { path } else { path.parent().unwrap_or(Path::new(".")) };
        let header: CorpusHeader = serde_json::from_str(&fs::read_to_string(dir.join("corpus.json"))?)?;
        let body = fs::read_to_string(dir.join("manifest.jsonl"))?;
        let records = body
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self { header, records })
    }
}

/// Corpus held in memory, utterances aligned with the manifest records.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub speakers: Vec<SpeakerProfile>,
    pub utterances: Vec<Utterance>,
    index: BTreeMap<String, usize>,
}

impl Corpus {
    fn new(manifest: CorpusManifest, speakers: Vec<SpeakerProfile>, utterances: Vec<Utterance>) -> Self {
        let index = utterances.iter().enumerate().map(|(i, u)| (u.utt_id.clone(), i)).collect();
        Self { manifest, speakers, utterances, index }
    }

    pub fn config(&self) -> &CorpusConfig {
        self.manifest.config()
    }

    pub fn utterance(&self, utt_id: &str) -> Option<&Utterance> {
        self.index.get(utt_id).map(|&i| &self.utterances[i])
    }

    pub fn record(&self, utt_id: &str) -> Option<&UtteranceRecord> {
        self.index.get(utt_id).map(|&i| &self.manifest.records[i])
    }

    pub fn speaker(&self, speaker_id: &str) -> Option<&SpeakerProfile> {
        self.speakers.iter().find(|s| s.speaker_id == speaker_id)
    }

    /// Speakers of a split in index order.
    pub fn split_speakers(&self, split: Split) -> Vec<&SpeakerProfile> {
        let ids = self.manifest.speakers(split);
        self.speakers.iter().filter(|s| ids.contains(&s.speaker_id)).collect()
    }

    /// Writes WAV audio, `AVT1` video tensors, `manifest.jsonl` and `corpus.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("audio"))?;
        fs::create_dir_all(dir.join("video"))?;
        for (rec, utt) in self.manifest.records.iter().zip(&self.utterances) {
            utt.audio.write_wav(&dir.join(&rec.audio_path))?;
            video_container(utt).save(&dir.join(&rec.video_path))?;
        }
        self.manifest.save(dir)
    }

    /// Loads a corpus written by [`Corpus::write`].
    pub fn load(path: &Path) -> Result<Self> {
        let manifest = CorpusManifest::load(path)?;
        let dir = if path.is_dir() { path } else { path.parent().unwrap_or(Path::new(".")) };
        let cfg = manifest.config().clone();
        cfg.validate()?;
        let speakers = speaker_roster(&cfg).into_iter().map(|(_, p)| p).collect();
        let mut utterances = Vec::with_capacity(manifest.records.len());
        for rec in &manifest.records {
            let audio = Waveform::read_wav(&dir.join(&rec.audio_path))?;
            let c = TensorContainer::load(&dir.join(&rec.video_path))?;
            let frames = c.require("frames")?;
            let TensorData::I16(px) = &frames.data else {
                return Err(Error::Format(format!("{}: frames must be i16", rec.video_path)));
            };
            let (t, h) = (frames.dims[0], frames.dims[1]);
            let video = VideoStream::from_i16(px, t, h, cfg.fps, VisualField::Face)?;
            let aperture = match &c.require("aperture")?.data {
                TensorData::F32(v) => v.clone(),
                TensorData::I16(_) => return Err(Error::Format("aperture must be f32".into())),
            };
            utterances.push(Utterance {
                speaker_id: rec.speaker_id.clone(),
                group: rec.group,
                utt_id: rec.utt_id.clone(),
                audio,
                video,
                aperture,
            });
        }
        Ok(Self::new(manifest, speakers, utterances))
    }
}

fn video_container(utt: &Utterance) -> TensorContainer {
    let v = &utt.video;
    let mut c = TensorContainer::new();
    c.push(NamedTensor::i16("frames", &[v.n_frames(), v.size(), v.size()], v.to_i16()));
    c.push(NamedTensor::f32("aperture", &[utt.aperture.len()], utt.aperture.clone()));
    c
}

/// Every speaker with its split, in global index order. Groups alternate
/// within a split so that each split is balanced.
pub fn speaker_roster(cfg: &CorpusConfig) -> Vec<(Split, SpeakerProfile)> {
    let mut out = Vec::new();
    let mut index = 0;
    for split in Split::ALL {
        for k in 0..cfg.speakers_in(split) {
            let group = if k % 2 == 0 { Group::Low } else { Group::High };
            out.push((split, make_speaker_at(cfg.seed, index, group, cfg.resolution)));
            index += 1;
        }
    }
    out
}

pub fn utterance_id(speaker_id: &str, k: usize) -> String {
    format!("{speaker_id}_u{k:02}")
}

/// Generates the whole corpus in memory.
pub fn build_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let synth = Synthesizer { sample_rate: cfg.sample_rate, fps: cfg.fps };
    let roster = speaker_roster(cfg);
    let mut records = Vec::new();
    let mut utterances = Vec::new();
    let mut counts = BTreeMap::new();
    for (split, profile) in &roster {
        for k in 0..cfg.utterances_per_speaker {
            let utt_id = utterance_id(&profile.speaker_id, k);
            let item_seed = stable_seed(cfg.seed, &profile.speaker_id, &utt_id);
            let span = MAX_DURATION_S - MIN_DURATION_S;
            let duration = MIN_DURATION_S + span * ((item_seed >> 11) as f64 / (1u64 << 53) as f64);
            let utt = synth.synthesize(profile, &utt_id, item_seed, duration)?;
            records.push(UtteranceRecord {
                speaker_id: profile.speaker_id.clone(),
                utt_id: utt_id.clone(),
                group: profile.group,
                split: *split,
                audio_path: format!("audio/{utt_id}.wav"),
                video_path: format!("video/{utt_id}.avt"),
                duration_s: utt.duration_s(),
            });
            utterances.push(utt);
            *counts.entry(*split).or_insert(0) += 1;
        }
    }
    let manifest = CorpusManifest { header: CorpusHeader { config: cfg.clone(), counts }, records };
    Ok(Corpus::new(manifest, roster.into_iter().map(|(_, p)| p).collect(), utterances))
}

/// Nearest-template speaker classification of time-averaged frames. With
/// `field == Mouth` both the templates and the videos are mouth crops.
/// Returns the fraction of utterances assigned to their own speaker.
pub fn nearest_template_accuracy(corpus: &Corpus, split: Split, field: VisualField) -> Result<f64> {
    let speakers = corpus.split_speakers(split);
    let templates: Vec<(String, Vec<f32>)> = speakers
        .iter()
        .map(|p| {
            let still = VideoStream::new(p.face_template.clone(), 1, p.resolution, corpus.config().fps, VisualField::Face)?;
            let img = match field {
                VisualField::Face => still,
                VisualField::Mouth => crop_mouth(&still)?,
            };
            Ok((p.speaker_id.clone(), img.frames().to_vec()))
        })
        .collect::<Result<_>>()?;
    let mut correct = 0usize;
    let mut total = 0usize;
    for (rec, utt) in corpus.manifest.records.iter().zip(&corpus.utterances) {
        if rec.split != split {
            continue;
        }
        let video = match field {
            VisualField::Face => utt.video.clone(),
            VisualField::Mouth => crop_mouth(&utt.video)?,
        };
        let mean = video.mean_frame();
        let mut best = (f64::INFINITY, "");
        for (id, t) in &templates {
            let d: f64 = mean.iter().zip(t).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
            if d < best.0 {
                best = (d, id);
            }
        }
        correct += usize::from(best.1 == rec.speaker_id);
        total += 1;
    }
    Ok(correct as f64 / total.max(1) as f64)
}
