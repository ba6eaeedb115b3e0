use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_FPS: u32 = 25;
pub const DEFAULT_RESOLUTION: usize = 32;

/// Mouth rectangle in normalised face coordinates: `(u0, u1, v0, v1)`,
/// `u` horizontal, `v` vertical. The face template is speaker-independent inside it.
pub const MOUTH_BOX: (f64, f64, f64, f64) = (0.25, 0.75, 0.6, 0.92);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VisualField {
    Face,
    Mouth,
}

impl VisualField {
    pub fn as_str(self) -> &'static str {
        match self {
            VisualField::Face => "face",
            VisualField::Mouth => "mouth",
        }
    }
}

impl std::str::FromStr for VisualField {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "face" => Ok(VisualField::Face),
            "mouth" | "lip" => Ok(VisualField::Mouth),
            _ => Err(Error::Config(format!("unknown visual field {s:?}"))),
        }
    }
}

/// Greyscale square video, frames stored row-major as `T x H x W` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoStream {
    frames: Vec<f32>,
    n_frames: usize,
    size: usize,
    fps: u32,
    field: VisualField,
}

impl VideoStream {
    pub fn new(frames: Vec<f32>, n_frames: usize, size: usize, fps: u32, field: VisualField) -> Result<Self> {
        if frames.len() != n_frames * size * size {
            return Err(Error::Shape(format!(
                "{} pixels for {n_frames} frames of {size}x{size}",
                frames.len()
            )));
        }
        if n_frames == 0 {
            return Err(Error::Shape("video has no frames".into()));
        }
        Ok(Self { frames, n_frames, size, fps, field })
    }

    pub fn frames(&self) -> &[f32] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.size * self.size;
        &self.frames[t * n..(t + 1) * n]
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn fps(&self) -> u32 {
        self.fps
    }

    pub fn field(&self) -> VisualField {
        self.field
    }

    /// Frames `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Self {
        let n = self.size * self.size;
        Self {
            frames: self.frames[start * n..(start + len) * n].to_vec(),
            n_frames: len,
            size: self.size,
            fps: self.fps,
            field: self.field,
        }
    }

    /// Pixel-wise mean over time.
    pub fn mean_frame(&self) -> Vec<f32> {
        let n = self.size * self.size;
        let mut acc = vec![0f64; n];
        for t in 0..self.n_frames {
            for (a, &p) in acc.iter_mut().zip(self.frame(t)) {
                *a += p as f64;
            }
        }
        acc.into_iter().map(|a| (a / self.n_frames as f64) as f32).collect()
    }

    /// Snaps pixels onto the `i16` storage grid so that file round trips are lossless.
    pub fn quantize(&mut self) {
        for p in &mut self.frames {
            *p = quantize_pixel(*p) as f32 / PIXEL_SCALE;
        }
    }

    pub fn to_i16(&self) -> Vec<i16> {
        self.frames.iter().map(|&p| quantize_pixel(p)).collect()
    }

    pub fn from_i16(data: &[i16], n_frames: usize, size: usize, fps: u32, field: VisualField) -> Result<Self> {
        Self::new(data.iter().map(|&v| v as f32 / PIXEL_SCALE).collect(), n_frames, size, fps, field)
    }
}

const PIXEL_SCALE: f32 = 32767.0;

fn quantize_pixel(p: f32) -> i16 {
    (p.clamp(0.0, 1.0) * PIXEL_SCALE).round() as i16
}

/// Integer pixel bounds `(row0, row1, col0, col1)` of the mouth box, exclusive ends.
pub fn mouth_box_pixels(size: usize) -> (usize, usize, usize, usize) {
    let s = size as f64;
    let (u0, u1, v0, v1) = MOUTH_BOX;
    ((v0 * s).round() as usize, (v1 * s).round() as usize, (u0 * s).round() as usize, (u1 * s).round() as usize)
}

/// Cuts the mouth rectangle out of every frame and resizes it bilinearly back
/// to the stream's resolution.
pub fn crop_mouth(video: &VideoStream) -> Result<VideoStream> {
    if video.field == VisualField::Mouth {
        return Err(Error::AlreadyCropped);
    }
    let size = video.size;
    let (r0, r1, c0, c1) = mouth_box_pixels(size);
    let (bh, bw) = (r1 - r0, c1 - c0);
    let mut out = Vec::with_capacity(video.frames.len());
    for t in 0..video.n_frames {
        let f = video.frame(t);
        for y in 0..size {
            let sy = ((y as f64 + 0.5) * bh as f64 / size as f64 - 0.5).clamp(0.0, (bh - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(bh - 1);
            let fy = (sy - y0 as f64) as f32;
            for x in 0..size {
                let sx = ((x as f64 + 0.5) * bw as f64 / size as f64 - 0.5).clamp(0.0, (bw - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(bw - 1);
                let fx = (sx - x0 as f64) as f32;
                let at = |r: usize, c: usize| f[(r0 + r) * size + c0 + c];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    VideoStream::new(out, video.n_frames, size, video.fps, VisualField::Mouth)
}

/// Face template with the mouth drawn at each frame's aperture and viseme width.
pub(crate) fn render_video(template: &[f32], size: usize, aperture: &[f32], widths: &[f64], fps: u32) -> VideoStream {
    let (r0, r1, c0, c1) = mouth_box_pixels(size);
    let mut frames = Vec::with_capacity(aperture.len() * size * size);
    for (t, &a) in aperture.iter().enumerate() {
        let mut frame = template.to_vec();
        for r in r0..r1 {
            for c in c0..c1 {
                frame[r * size + c] = mouth_pixel(template[r * size + c], r, c, size, a as f64, widths[t]);
            }
        }
        frames.extend(frame);
    }
    let mut v = VideoStream::new(frames, aperture.len(), size, fps, VisualField::Face).expect("consistent dims");
    v.quantize();
    v
}

const MOUTH_CENTER: (f64, f64) = (0.5, 0.76);
const LIP_LEVEL: f64 = 0.3;
const CAVITY_LEVEL: f64 = 0.05;
const SUPERSAMPLE: usize = 4;

/// Supersampled mouth: a dark cavity whose half-height follows the aperture,
/// inside a lip ring; both share the viseme-dependent half-width.
fn mouth_pixel(base: f32, r: usize, c: usize, size: usize, aperture: f64, half_width: f64) -> f32 {
    let half_height = 0.012 + 0.11 * aperture;
    let lip = 0.035;
    let mut acc = 0.0;
    for sy in 0..SUPERSAMPLE {
        for sx in 0..SUPERSAMPLE {
            let u = (c as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64) / size as f64;
            let v = (r as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64) / size as f64;
            let du = (u - MOUTH_CENTER.0) / half_width;
            let inner = du * du + ((v - MOUTH_CENTER.1) / half_height).powi(2);
            let outer = ((u - MOUTH_CENTER.0) / (half_width + lip)).powi(2)
                + ((v - MOUTH_CENTER.1) / (half_height + lip)).powi(2);
            acc += if inner <= 1.0 {
                CAVITY_LEVEL
            } else if outer <= 1.0 {
                LIP_LEVEL
            } else {
                base as f64
            };
        }
    }
    (acc / (SUPERSAMPLE * SUPERSAMPLE) as f64) as f32
}
