use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::seed::stable_seed;
use super::video::{mouth_box_pixels, DEFAULT_RESOLUTION};
use crate::error::{Error, Result};

pub const N_HARMONICS: usize = 8;

/// Pitch class used for the Diff/Same stratification of mixtures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Low,
    High,
}

impl Group {
    pub fn f0_range(self) -> (f64, f64) {
        match self {
            Group::Low => (100.0, 140.0),
            Group::High => (180.0, 240.0),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Low => "low",
            Group::High => "high",
        }
    }
}

impl std::str::FromStr for Group {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(Group::Low),
            "high" => Ok(Group::High),
            _ => Err(Error::Config(format!("unknown group {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    pub group: Group,
    pub f0_hz: f64,
    /// Relative harmonic amplitudes in `[0, 1]`, maximum exactly 1.
    pub timbre: [f64; N_HARMONICS],
    /// `resolution x resolution` greyscale image, row-major.
    pub face_template: Vec<f32>,
    pub resolution: usize,
    pub seed: u64,
}

impl SpeakerProfile {
    /// Position of the speaker's f0 inside its group range, in `[0, 1]`.
    pub fn f0_position(&self) -> f64 {
        let (lo, hi) = self.group.f0_range();
        (self.f0_hz - lo) / (hi - lo)
    }
}

pub fn speaker_id(index: usize) -> String {
    format!("spk{index:03}")
}

/// Speaker at the default 32x32 face resolution.
pub fn make_speaker(global_seed: u64, index: usize, group: Group) -> SpeakerProfile {
    make_speaker_at(global_seed, index, group, DEFAULT_RESOLUTION)
}

pub fn make_speaker_at(global_seed: u64, index: usize, group: Group, resolution: usize) -> SpeakerProfile {
    let id = speaker_id(index);
    let seed = stable_seed(global_seed, &id, group.as_str());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = group.f0_range();
    let f0_hz = rng.random_range(lo..=hi);
    // Low voices are darker (steeper spectral tilt) than high ones.
    let tilt = match group {
        Group::Low => rng.random_range(0.6..1.0),
        Group::High => rng.random_range(0.0..0.4),
    };
    let mut timbre = [0.0; N_HARMONICS];
    for (h, t) in timbre.iter_mut().enumerate() {
        *t = rng.random_range(0.4..1.0) * ((h + 1) as f64).powf(-tilt);
    }
    let max = timbre.iter().cloned().fold(0.0, f64::max);
    timbre.iter_mut().for_each(|t| *t /= max);
    let mut profile = SpeakerProfile {
        speaker_id: id,
        group,
        f0_hz,
        timbre,
        face_template: Vec::new(),
        resolution,
        seed,
    };
    profile.face_template = draw_face(&profile, &mut rng);
    profile
}

const BACKGROUND: f32 = 0.05;
const MOUTH_SKIN: f32 = 0.6;

struct Blob {
    u: f64,
    v: f64,
    sigma: f64,
    amp: f64,
}

/// Face appearance: hair brightness follows the group, nose length follows
/// f0 within the group, eye size follows spectral brightness; eye placement,
/// skin tone and blotches are speaker-specific. The mouth box is identical
/// for every speaker.
fn draw_face(p: &SpeakerProfile, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let size = p.resolution;
    let skin = rng.random_range(0.45..0.72);
    let hair = match p.group {
        Group::Low => rng.random_range(0.08..0.22),
        Group::High => rng.random_range(0.82..0.96),
    };
    let hairline = rng.random_range(0.17..0.27);
    let eye_v = rng.random_range(0.36..0.44);
    let eye_du = rng.random_range(0.14..0.22);
    let brightness = p.timbre.iter().skip(4).sum::<f64>() / 4.0;
    let eye_r = 0.035 + 0.045 * brightness.clamp(0.0, 1.0);
    let eye_level = rng.random_range(0.0..0.2);
    let nose_len = 0.04 + 0.1 * p.f0_position();
    let blobs: Vec<Blob> = (0..3)
        .map(|_| Blob {
            u: rng.random_range(0.15..0.85),
            v: rng.random_range(0.2..0.6),
            sigma: rng.random_range(0.04..0.1),
            amp: rng.random_range(-0.2..0.2),
        })
        .collect();
    let (r0, r1, c0, c1) = mouth_box_pixels(size);
    let mut img = vec![0f32; size * size];
    for r in 0..size {
        for c in 0..size {
            let u = (c as f64 + 0.5) / size as f64;
            let v = (r as f64 + 0.5) / size as f64;
            let in_head = ((u - 0.5) / 0.42).powi(2) + ((v - 0.5) / 0.47).powi(2) <= 1.0;
            let in_mouth = (r0..r1).contains(&r) && (c0..c1).contains(&c);
            img[r * size + c] = if !in_head {
                BACKGROUND
            } else if in_mouth {
                MOUTH_SKIN
            } else if v < hairline {
                hair as f32
            } else {
                let mut val = skin;
                for b in &blobs {
                    val += b.amp * (-((u - b.u).powi(2) + (v - b.v).powi(2)) / (2.0 * b.sigma * b.sigma)).exp();
                }
                for side in [-1.0, 1.0] {
                    if ((u - 0.5 - side * eye_du).powi(2) + (v - eye_v).powi(2)).sqrt() <= eye_r {
                        val = eye_level;
                    }
                }
                if (u - 0.5).abs() <= 0.03 && v >= 0.45 && v <= 0.45 + nose_len {
                    val = skin + 0.2;
                }
                val.clamp(0.0, 1.0) as f32
            };
        }
    }
    img
}
