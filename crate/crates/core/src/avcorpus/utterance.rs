use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::speaker::{Group, SpeakerProfile, N_HARMONICS};
use super::video::{render_video, VideoStream, DEFAULT_FPS};
use crate::audio::{frame_rms, Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};

pub const MIN_DURATION_S: f64 = 4.0;
pub const MAX_DURATION_S: f64 = 6.0;

/// Size of the shared pseudo-phone inventory.
pub const N_PHONES: usize = 6;

/// Harmonics (0-based) emphasised by each pseudo-phone; the rest are attenuated.
const PHONE_HARMONICS: [[usize; 2]; N_PHONES] = [[0, 1], [1, 2], [2, 3], [3, 5], [4, 6], [5, 7]];
const OFF_HARMONIC_GAIN: f64 = 0.08;
/// Mouth half-width for each pseudo-phone, and for silence.
const VISEME_HALF_WIDTH: [f64; N_PHONES] = [0.08, 0.105, 0.13, 0.155, 0.18, 0.205];
const REST_HALF_WIDTH: f64 = 0.12;

const PHONE_MS: (f64, f64) = (80.0, 240.0);
const SILENCE_MS: (f64, f64) = (80.0, 250.0);
const SILENCE_PROB: f64 = 0.45;
const RAMP_MS: f64 = 15.0;
const PEAK: f64 = 0.8;

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub speaker_id: String,
    pub group: Group,
    pub utt_id: String,
    pub audio: Waveform,
    pub video: VideoStream,
    /// Mouth opening per video frame, in `[0, 1]`.
    pub aperture: Vec<f32>,
}

impl Utterance {
    pub fn duration_s(&self) -> f64 {
        self.audio.duration_s()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Synthesizer {
    pub sample_rate: u32,
    pub fps: u32,
}

impl Default for Synthesizer {
    fn default() -> Self {
        Self { sample_rate: DEFAULT_SAMPLE_RATE, fps: DEFAULT_FPS }
    }
}

/// Synthesises with the default rates and the utterance id `"utt"`.
pub fn synth_utterance(profile: &SpeakerProfile, utt_seed: u64, duration_s: f64) -> Result<Utterance> {
    Synthesizer::default().synthesize(profile, "utt", utt_seed, duration_s)
}

struct Segment {
    start: usize,
    len: usize,
    phone: usize,
    amp: f64,
}

impl Synthesizer {
    pub fn samples_per_frame(&self) -> usize {
        (self.sample_rate / self.fps) as usize
    }

    pub fn synthesize(&self, profile: &SpeakerProfile, utt_id: &str, utt_seed: u64, duration_s: f64) -> Result<Utterance> {
        if !(MIN_DURATION_S..=MAX_DURATION_S).contains(&duration_s) {
            return Err(Error::DurationOutOfRange(duration_s));
        }
        if self.sample_rate % self.fps != 0 {
            return Err(Error::Config(format!("sample rate {} is not a multiple of fps {}", self.sample_rate, self.fps)));
        }
        let sr = self.sample_rate as f64;
        let spf = self.samples_per_frame();
        let n_frames = (duration_s * self.fps as f64).round() as usize;
        let n = n_frames * spf;
        let mut rng = ChaCha8Rng::seed_from_u64(utt_seed);

        let mut segments = Vec::new();
        let mut t = 0usize;
        while t < n {
            if rng.random_bool(SILENCE_PROB) {
                t += (rng.random_range(SILENCE_MS.0..SILENCE_MS.1) * sr / 1000.0) as usize;
                continue;
            }
            let len = (rng.random_range(PHONE_MS.0..PHONE_MS.1) * sr / 1000.0) as usize;
            let phone = rng.random_range(0..N_PHONES);
            let amp = rng.random_range(0.1..1.0);
            segments.push(Segment { start: t, len: len.min(n - t), phone, amp });
            t += len;
        }

        let offset = rng.random_range(-0.03..0.03);
        let vibrato_hz = rng.random_range(0.3..1.0);
        let vibrato_phase = rng.random_range(0.0..2.0 * PI);
        let harmonic_phase: Vec<f64> = (0..N_HARMONICS).map(|_| rng.random_range(0.0..2.0 * PI)).collect();

        let mut phase = vec![0f64; n];
        let mut acc = 0.0;
        for (i, p) in phase.iter_mut().enumerate() {
            let time = i as f64 / sr;
            let f0 = profile.f0_hz * (1.0 + offset) * (1.0 + 0.04 * (2.0 * PI * vibrato_hz * time + vibrato_phase).sin());
            acc += 2.0 * PI * f0 / sr;
            *p = acc;
        }

        let mut x = vec![0f64; n];
        let mut phone_energy = vec![[0f64; N_PHONES]; n_frames];
        let ramp = (RAMP_MS * sr / 1000.0).max(1.0);
        for seg in &segments {
            let gains: Vec<f64> = (0..N_HARMONICS)
                .map(|h| {
                    let g = if PHONE_HARMONICS[seg.phone].contains(&h) { 1.0 } else { OFF_HARMONIC_GAIN };
                    g * profile.timbre[h]
                })
                .collect();
            let r = ramp.min(seg.len as f64 / 2.0);
            for k in 0..seg.len {
                let i = seg.start + k;
                let edge = (k as f64).min((seg.len - 1 - k) as f64) / r;
                let env = seg.amp * if edge >= 1.0 { 1.0 } else { 0.5 - 0.5 * (PI * edge).cos() };
                let mut s = 0.0;
                for (h, g) in gains.iter().enumerate() {
                    s += g * ((h + 1) as f64 * phase[i] + harmonic_phase[h]).sin();
                }
                x[i] = env * s;
                phone_energy[i / spf][seg.phone] += env;
            }
        }
        let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = if peak > 0.0 { PEAK / peak } else { 0.0 };
        let mut audio = Waveform::new(x.iter().map(|v| (v * scale) as f32).collect(), self.sample_rate)?;
        audio.quantize_pcm16();

        let aperture = aperture_from_audio(audio.samples(), spf, n_frames);
        let widths: Vec<f64> = phone_energy
            .iter()
            .map(|e| {
                let (best, val) = e.iter().enumerate().fold((0, 0.0), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
                if val > 0.0 {
                    VISEME_HALF_WIDTH[best]
                } else {
                    REST_HALF_WIDTH
                }
            })
            .collect();
        let video = render_video(&profile.face_template, profile.resolution, &aperture, &widths, self.fps);
        Ok(Utterance { speaker_id: profile.speaker_id.clone(), group: profile.group, utt_id: utt_id.to_string(), audio, video, aperture })
    }
}

/// Frame RMS, smoothed with a `[1/4, 1/2, 1/4]` kernel and divided by its maximum.
pub fn aperture_from_audio(samples: &[f32], samples_per_frame: usize, n_frames: usize) -> Vec<f32> {
    let rms = frame_rms(samples, samples_per_frame, n_frames);
    let at = |i: isize| rms[i.clamp(0, n_frames as isize - 1) as usize];
    let smooth: Vec<f64> = (0..n_frames as isize).map(|i| 0.25 * at(i - 1) + 0.5 * at(i) + 0.25 * at(i + 1)).collect();
    let max = smooth.iter().cloned().fold(0.0, f64::max);
    smooth.iter().map(|&v| if max > 0.0 { (v / max) as f32 } else { 0.0 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::pearson;
    use crate::avcorpus::speaker::{make_speaker, Group};
    use crate::avcorpus::video::{crop_mouth, VisualField};

    #[test]
    fn rejects_durations_outside_range() {
        let p = make_speaker(7, 0, Group::Low);
        assert!(matches!(synth_utterance(&p, 1, 3.0), Err(Error::DurationOutOfRange(_))));
        assert!(matches!(synth_utterance(&p, 1, 6.5), Err(Error::DurationOutOfRange(_))));
    }

    #[test]
    fn deterministic() {
        let p = make_speaker(7, 0, Group::Low);
        let a = synth_utterance(&p, 11, 4.5).unwrap();
        let b = synth_utterance(&p, 11, 4.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn aperture_tracks_frame_rms() {
        for (i, group) in [(0, Group::Low), (1, Group::High), (2, Group::Low)] {
            let p = make_speaker(3, i, group);
            for seed in 0..10u64 {
                let u = synth_utterance(&p, seed, 4.0 + 0.2 * seed as f64).unwrap();
                let rms = frame_rms(u.audio.samples(), 320, u.video.n_frames());
                let ap: Vec<f64> = u.aperture.iter().map(|&a| a as f64).collect();
                let r = pearson(&ap, &rms);
                assert!(r >= 0.9, "speaker {i} seed {seed}: r = {r}");
                assert!(u.aperture.iter().all(|a| (0.0..=1.0).contains(a)));
                assert_eq!(u.video.n_frames(), (u.duration_s() * 25.0).round() as usize);
            }
        }
    }

    #[test]
    fn mouth_crops_do_not_carry_identity() {
        let a = make_speaker(5, 0, Group::Low);
        let b = make_speaker(5, 1, Group::High);
        let ua = synth_utterance(&a, 9, 4.0).unwrap();
        // Same seed gives the same phone sequence, hence the same aperture track.
        let ub = Synthesizer::default().synthesize(&b, "utt", 9, 4.0).unwrap();
        let ca = crop_mouth(&ua.video).unwrap();
        let cb = crop_mouth(&ub.video).unwrap();
        assert_eq!(ca.field(), VisualField::Mouth);
        assert_eq!(ca.n_frames(), ua.video.n_frames());
        assert_eq!(ca.fps(), ua.video.fps());
        let face_diff = a.face_template.iter().zip(&b.face_template).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        // Apertures differ in scale only through the peak normalisation; compare
        // at identical aperture sequences by rendering b with a's track.
        let ub_same = crate::avcorpus::video::render_video(
            &b.face_template,
            32,
            &ua.aperture,
            &vec![0.12; ua.aperture.len()],
            25,
        );
        let ua_same =
            crate::avcorpus::video::render_video(&a.face_template, 32, &ua.aperture, &vec![0.12; ua.aperture.len()], 25);
        let (ma, mb) = (crop_mouth(&ua_same).unwrap(), crop_mouth(&ub_same).unwrap());
        let crop_diff = ma.frames().iter().zip(mb.frames()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(crop_diff < face_diff, "crop diff {crop_diff} vs face diff {face_diff}");
        assert!(crop_diff < 0.05);
        let _ = cb;
        assert!(matches!(crop_mouth(&ca), Err(Error::AlreadyCropped)));
    }
}
