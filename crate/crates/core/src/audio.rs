//! Mono waveforms and 16-bit PCM WAV I/O.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 8000;

const PCM_SCALE: f32 = 32767.0;

/// Mono signal at a fixed sample rate. Samples are finite and there is at
/// least one of them; corpus and mixture signals additionally stay in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Shape("waveform must have at least one sample".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Shape("waveform contains non-finite samples".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn truncated(&self, len: usize) -> Self {
        Self { samples: self.samples[..len.min(self.samples.len())].to_vec(), sample_rate: self.sample_rate }
    }

    pub fn scaled(&self, factor: f32) -> Self {
        Self { samples: self.samples.iter().map(|s| s * factor).collect(), sample_rate: self.sample_rate }
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }

    /// Mean-square energy.
    pub fn power(&self) -> f64 {
        mean_square(&self.samples)
    }

    /// Snaps every sample onto the 16-bit PCM grid so that a WAV round trip is lossless.
    pub fn quantize_pcm16(&mut self) {
        for s in &mut self.samples {
            *s = pcm16_value(*s) as f32 / PCM_SCALE;
        }
    }

    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            w.write_sample(pcm16_value(s))?;
        }
        w.finalize()?;
        Ok(())
    }

    pub fn read_wav(path: &Path) -> Result<Self> {
        let mut r = hound::WavReader::open(path)?;
        let spec = r.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(Error::Format(format!("{}: expected mono 16-bit PCM", path.display())));
        }
        let samples = r
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / PCM_SCALE))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Self::new(samples, spec.sample_rate)
    }
}

fn pcm16_value(s: f32) -> i16 {
    (s.clamp(-1.0, 1.0) * PCM_SCALE).round() as i16
}

pub fn mean_square(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64
}

/// Root-mean-square of consecutive non-overlapping frames of `frame_len` samples.
/// A trailing partial frame is included.
pub fn frame_rms(x: &[f32], frame_len: usize, frames: usize) -> Vec<f64> {
    (0..frames)
        .map(|t| {
            let lo = (t * frame_len).min(x.len());
            let hi = ((t + 1) * frame_len).min(x.len());
            mean_square(&x[lo..hi]).sqrt()
        })
        .collect()
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}
