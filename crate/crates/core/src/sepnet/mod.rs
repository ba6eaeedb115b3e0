//! The four extraction variants: a shared mask-based audio separator driven
//! by one of three visual routes (joint branch, identity branch, sync branch)
//! or by the fusion of the identity and sync branches.

mod checkpoint;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{CheckpointHeader, CHECKPOINT_MAGIC};

use crate::audio::{Waveform, DEFAULT_SAMPLE_RATE};
use crate::avcorpus::{crop_mouth, VideoStream, VisualField, DEFAULT_FPS, DEFAULT_RESOLUTION};
use crate::error::{Error, Result};
use crate::nn::{Graph, ParamId, ParamStore, Tensor, Var};

/// Channels of the 3-D convolution and of the three strided 2-D convolutions.
const FRONTEND_CHANNELS: [usize; 4] = [16, 32, 32, 64];
const CONV3D_KERNEL: usize = 7;
const CONV2D_KERNEL: usize = 3;
const TEMPORAL_LAYERS: usize = 5;
const PRELU_INIT: f32 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelVariant {
    Baseline,
    Spk,
    Sync,
    Davse,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 4] = [ModelVariant::Baseline, ModelVariant::Spk, ModelVariant::Sync, ModelVariant::Davse];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelVariant::Baseline => "baseline",
            ModelVariant::Spk => "spk",
            ModelVariant::Sync => "sync",
            ModelVariant::Davse => "davse",
        }
    }

    /// Visual branches owned by a model of this variant.
    pub fn branches(self) -> &'static [VisualBranch] {
        match self {
            ModelVariant::Baseline => &[VisualBranch::Joint],
            ModelVariant::Spk => &[VisualBranch::Identity],
            ModelVariant::Sync => &[VisualBranch::Sync],
            ModelVariant::Davse => &[VisualBranch::Identity, VisualBranch::Sync],
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(ModelVariant::Baseline),
            "spk" => Ok(ModelVariant::Spk),
            "sync" => Ok(ModelVariant::Sync),
            "davse" => Ok(ModelVariant::Davse),
            _ => Err(Error::Config(format!("unknown model variant {s:?}"))),
        }
    }
}

/// A visual encoder branch; each is one freezable parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VisualBranch {
    Joint,
    Identity,
    Sync,
}

impl VisualBranch {
    pub fn group(self) -> &'static str {
        match self {
            VisualBranch::Joint => "joint_visual",
            VisualBranch::Identity => "identity_visual",
            VisualBranch::Sync => "sync_visual",
        }
    }
}

/// Role of an embedding sequence in the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EmbeddingTag {
    /// Input of the extraction network (fused or joint).
    #[serde(rename = "V")]
    V,
    #[serde(rename = "V_I")]
    VI,
    #[serde(rename = "V_S")]
    VS,
    /// Identity-extractor output fed to the speaker classifier.
    #[serde(rename = "V_IE")]
    VIE,
    #[serde(rename = "V_SE")]
    VSE,
    /// Channel concatenation of `V_I` and `V_S`.
    #[serde(rename = "V_IS")]
    VIS,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TcnConfig {
    pub bottleneck: usize,
    pub hidden: usize,
    pub blocks_per_repeat: usize,
    pub repeats: usize,
    pub kernel: usize,
}

impl Default for TcnConfig {
    fn default() -> Self {
        Self { bottleneck: 64, hidden: 128, blocks_per_repeat: 4, repeats: 2, kernel: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub n_audio_filters: usize,
    pub audio_kernel: usize,
    pub audio_stride: usize,
    /// Embedding width of one branch; the joint branch is twice as wide.
    pub visual_dim: usize,
    pub tcn: TcnConfig,
    pub visual_field: VisualField,
    pub sample_rate: u32,
    pub fps: u32,
    pub resolution: usize,
    /// Temporal extent of the first (3-D) visual convolution.
    pub visual_temporal_kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: ModelVariant::Baseline,
            n_audio_filters: 128,
            audio_kernel: 32,
            audio_stride: 16,
            visual_dim: 64,
            tcn: TcnConfig::default(),
            visual_field: VisualField::Face,
            sample_rate: DEFAULT_SAMPLE_RATE,
            fps: DEFAULT_FPS,
            resolution: DEFAULT_RESOLUTION,
            visual_temporal_kernel: 5,
        }
    }
}

impl ModelConfig {
    pub fn with_variant(variant: ModelVariant) -> Self {
        Self { variant, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.audio_stride == 0 || self.audio_kernel < self.audio_stride {
            return bad("audio_kernel must be at least audio_stride > 0".into());
        }
        if self.fps == 0 || self.sample_rate % self.audio_stride as u32 != 0 || (self.sample_rate / self.audio_stride as u32) % self.fps != 0 {
            return bad(format!(
                "sample_rate / audio_stride = {} / {} must be a multiple of fps {}",
                self.sample_rate, self.audio_stride, self.fps
            ));
        }
        if self.tcn.kernel % 2 == 0 || self.visual_temporal_kernel % 2 == 0 {
            return bad("temporal kernels must be odd".into());
        }
        if self.resolution < 16 {
            return bad("resolution must be at least 16".into());
        }
        if [self.n_audio_filters, self.visual_dim, self.tcn.bottleneck, self.tcn.hidden, self.tcn.blocks_per_repeat, self.tcn.repeats]
            .contains(&0)
        {
            return bad("model dimensions must be positive".into());
        }
        Ok(())
    }

    /// Latent frames per video frame.
    pub fn upsample_ratio(&self) -> usize {
        (self.sample_rate as usize / self.audio_stride) / self.fps as usize
    }

    pub fn samples_per_frame(&self) -> usize {
        (self.sample_rate / self.fps) as usize
    }

    pub fn latent_frames(&self, n_samples: usize) -> Result<usize> {
        if n_samples < self.audio_kernel {
            return Err(Error::InputTooShort { len: n_samples, kernel: self.audio_kernel });
        }
        Ok((n_samples - self.audio_kernel) / self.audio_stride + 1)
    }

    pub fn branch_dim(&self, branch: VisualBranch) -> usize {
        match branch {
            VisualBranch::Joint => 2 * self.visual_dim,
            _ => self.visual_dim,
        }
    }

    /// Width of the embedding consumed by the extraction network.
    pub fn extractor_visual_dim(&self) -> usize {
        match self.variant {
            ModelVariant::Baseline => 2 * self.visual_dim,
            _ => self.visual_dim,
        }
    }
}

/// Encoder output for one waveform, `T_a × N_a`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentAudio {
    pub frames: Tensor,
}

/// Per-frame embeddings, `L × N`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSequence {
    pub features: Tensor,
    pub tag: EmbeddingTag,
}

impl EmbeddingSequence {
    pub fn len(&self) -> usize {
        self.features.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.dim(1)
    }

    /// From a graph value of shape `[1, N, L]`.
    fn from_channels_first(t: &Tensor, tag: EmbeddingTag) -> Self {
        Self { features: transpose(t.data(), t.dim(1), t.dim(2)), tag }
    }

    /// As a `[1, N, L]` tensor.
    fn channels_first(&self) -> Tensor {
        let (l, n) = (self.len(), self.dim());
        transpose(self.features.data(), l, n).reshape(&[1, n, l])
    }
}

/// `rows × cols` row-major into `cols × rows`.
fn transpose(data: &[f32], rows: usize, cols: usize) -> Tensor {
    let mut out = vec![0f32; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    Tensor::from_vec(&[cols, rows], out)
}

/// Linear interpolation of an embedding sequence along time by `ratio`.
pub fn upsample_visual(emb: &EmbeddingSequence, ratio: usize) -> Result<EmbeddingSequence> {
    if ratio == 0 {
        return Err(Error::Config("upsampling ratio must be at least 1".into()));
    }
    let mut g = Graph::new(false);
    let x = g.input(emb.channels_first());
    let y = g.upsample(x, ratio, emb.len() * ratio);
    Ok(EmbeddingSequence::from_channels_first(g.value(y), emb.tag))
}

/// Linear speaker classifier applied frame by frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SpkClassifierHead {
    /// `N × C`.
    pub w: Tensor,
}

impl SpkClassifierHead {
    pub fn n_classes(&self) -> usize {
        self.w.dim(1)
    }
}

/// Per-frame logits, `L × C`.
pub fn classify_frames(head: &SpkClassifierHead, v_ie: &EmbeddingSequence) -> Result<Tensor> {
    let (n, c) = (head.w.dim(0), head.w.dim(1));
    if v_ie.dim() != n {
        return Err(Error::Shape(format!("embedding width {} does not match classifier rows {n}", v_ie.dim())));
    }
    let l = v_ie.len();
    let (x, w) = (v_ie.features.data(), head.w.data());
    let mut out = vec![0f32; l * c];
    for t in 0..l {
        for k in 0..c {
            out[t * c + k] = (0..n).map(|i| x[t * n + i] * w[i * c + k]).sum();
        }
    }
    Ok(Tensor::from_vec(&[l, c], out))
}

/// Replaces the estimated mask, for probing the decoder path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MaskMode {
    #[default]
    Learned,
    Ones,
    Zeros,
}

/// Graph handles produced by [`SeparationModel::extract_graph`].
#[derive(Clone, Copy, Debug)]
pub struct ExtractVars {
    pub latent: Var,
    pub mask: Var,
    /// `[B, n]`.
    pub estimate: Var,
}

#[derive(Clone, Debug)]
pub struct Extraction {
    pub estimate: Waveform,
    /// `T_a × N_a`, entries in `[0, 1]`.
    pub mask: Tensor,
    pub v: EmbeddingSequence,
}

/// Precomputed branch outputs `[B, N, T]`, used in place of running a branch.
pub type BranchFeatures = BTreeMap<VisualBranch, Tensor>;

#[derive(Clone, Debug)]
pub struct SeparationModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Training-speaker count of the classifier head (spk only, otherwise 0).
    pub n_classes: usize,
    pub training_step: u64,
}

impl SeparationModel {
    pub fn new(config: ModelConfig, n_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.variant == ModelVariant::Spk && n_classes < 2 {
            return Err(Error::Config("spk model needs at least two training speakers".into()));
        }
        let n_classes = if config.variant == ModelVariant::Spk { n_classes } else { 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let c = &config;
        let (na, ka) = (c.n_audio_filters, c.audio_kernel);
        p.add_uniform("audio_encoder", "w", &[na, ka], ka, &mut rng);
        p.add_uniform("audio_decoder", "w", &[ka, na], na, &mut rng);
        for &branch in c.variant.branches() {
            add_branch(&mut p, c, branch, &mut rng);
        }
        if c.variant == ModelVariant::Davse {
            let d = c.visual_dim;
            p.add_uniform("fusion", "w", &[d, 2 * d], 2 * d, &mut rng);
            p.add_const("fusion", "b", &[d], 0.0);
        }
        if c.variant == ModelVariant::Spk {
            p.add_uniform("classifier", "w", &[n_classes, c.visual_dim], c.visual_dim, &mut rng);
        }
        add_extractor(&mut p, c, &mut rng);
        let mut model = Self { config, params: p, n_classes, training_step: 0 };
        if model.config.variant == ModelVariant::Davse {
            model.freeze_branches();
        }
        Ok(model)
    }

    pub fn variant(&self) -> ModelVariant {
        self.config.variant
    }

    pub fn frozen_set(&self) -> Vec<String> {
        self.params.frozen_groups().iter().cloned().collect()
    }

    pub fn freeze_branches(&mut self) {
        for b in self.config.variant.branches() {
            self.params.freeze(b.group());
        }
    }

    fn p(&self, g: &mut Graph, name: &str) -> Var {
        g.param(&self.params, self.pid(name))
    }

    fn pid(&self, name: &str) -> ParamId {
        self.params.id(name).unwrap_or_else(|| panic!("model has no parameter {name}"))
    }

    fn has_branch(&self, branch: VisualBranch) -> bool {
        self.config.variant.branches().contains(&branch)
    }

    /// Stacks equally long videos into `[B, T, H, W]`, cropping to the
    /// mouth when the model is configured for it.
    pub fn video_tensor(&self, videos: &[&VideoStream]) -> Result<Tensor> {
        let first = videos.first().ok_or_else(|| Error::Shape("empty video batch".into()))?;
        let (t, s) = (first.n_frames(), self.config.resolution);
        let mut data = Vec::with_capacity(videos.len() * t * s * s);
        for v in videos {
            if v.size() != s {
                return Err(Error::Shape(format!("video resolution {} does not match model resolution {s}", v.size())));
            }
            if v.n_frames() != t {
                return Err(Error::Shape("videos in a batch must have equal length".into()));
            }
            match (self.config.visual_field, v.field()) {
                (VisualField::Mouth, VisualField::Face) => data.extend_from_slice(crop_mouth(v)?.frames()),
                (VisualField::Face, VisualField::Mouth) => {
                    return Err(Error::Shape("face model given a mouth crop".into()));
                }
                _ => data.extend_from_slice(v.frames()),
            }
        }
        Ok(Tensor::from_vec(&[videos.len(), t, s, s], data))
    }

    /// Visual branch on a `[B, T, H, W]` video; returns `[B, N, T]`.
    pub fn branch_graph(&self, g: &mut Graph, video: &Tensor, branch: VisualBranch) -> Result<Var> {
        if !self.has_branch(branch) {
            return Err(Error::Config(format!("{} model has no {:?} branch", self.variant(), branch)));
        }
        let s = self.config.resolution;
        if video.rank() != 4 || video.dim(2) != s || video.dim(3) != s {
            return Err(Error::Shape(format!("video tensor {:?} does not match resolution {s}", video.shape())));
        }
        let x = self.frontend_graph(g, video, branch);
        Ok(self.temporal_graph(g, x, branch))
    }

    /// Per-frame convolutional stack up to pooling and projection, `[B, N, T]`.
    pub fn frontend_graph(&self, g: &mut Graph, video: &Tensor, branch: VisualBranch) -> Var {
        let gr = branch.group();
        let (w, b) = (self.p(g, &format!("{gr}.conv3d.w")), self.p(g, &format!("{gr}.conv3d.b")));
        let mut x = g.conv3d(video, w, b, self.config.visual_temporal_kernel, CONV3D_KERNEL, 2);
        x = g.relu(x);
        for layer in 0..3 {
            let (w, b) = (self.p(g, &format!("{gr}.conv{layer}.w")), self.p(g, &format!("{gr}.conv{layer}.b")));
            x = g.conv2d(x, w, b, CONV2D_KERNEL, 2);
            x = g.relu(x);
        }
        let x = g.pool_to_sequence(x, video.dim(0));
        let (w, b) = (self.p(g, &format!("{gr}.proj.w")), self.p(g, &format!("{gr}.proj.b")));
        g.pointwise(x, w, Some(b))
    }

    fn temporal_graph(&self, g: &mut Graph, mut x: Var, branch: VisualBranch) -> Var {
        let gr = branch.group();
        for l in 0..TEMPORAL_LAYERS {
            let pre = format!("{gr}.tb{l}");
            let h = g.relu(x);
            let (gamma, beta) = (self.p(g, &format!("{pre}.bn_g")), self.p(g, &format!("{pre}.bn_b")));
            let running = (self.pid(&format!("{pre}.bn_mean")), self.pid(&format!("{pre}.bn_var")));
            let h = g.batch_norm(&self.params, h, gamma, beta, running);
            let (dw, db) = (self.p(g, &format!("{pre}.dw")), self.p(g, &format!("{pre}.dw_b")));
            let h = g.depthwise(h, dw, Some(db), 1);
            let (pw, pb) = (self.p(g, &format!("{pre}.pw")), self.p(g, &format!("{pre}.pw_b")));
            let h = g.pointwise(h, pw, Some(pb));
            x = g.add(x, h);
        }
        x
    }

    /// The embedding `V` consumed by the extraction network. Branches found
    /// in `cached` are taken from there instead of being run on `video`.
    pub fn visual_graph(&self, g: &mut Graph, video: Option<&Tensor>, cached: &BranchFeatures) -> Result<Var> {
        let run = |g: &mut Graph, branch: VisualBranch| -> Result<Var> {
            if let Some(t) = cached.get(&branch) {
                let want = self.config.branch_dim(branch);
                if t.rank() != 3 || t.dim(1) != want {
                    return Err(Error::Shape(format!("cached {branch:?} features {:?}, expected width {want}", t.shape())));
                }
                return Ok(g.input(t.clone()));
            }
            let video = video.ok_or_else(|| Error::Shape(format!("no video for the {branch:?} branch")))?;
            self.branch_graph(g, video, branch)
        };
        match self.variant() {
            ModelVariant::Baseline => run(g, VisualBranch::Joint),
            ModelVariant::Spk => run(g, VisualBranch::Identity),
            ModelVariant::Sync => run(g, VisualBranch::Sync),
            ModelVariant::Davse => {
                let vi = run(g, VisualBranch::Identity)?;
                let vs = run(g, VisualBranch::Sync)?;
                self.fuse_graph(g, vi, vs)
            }
        }
    }

    /// Concatenation over channels followed by a 1×1 convolution.
    pub fn fuse_graph(&self, g: &mut Graph, vi: Var, vs: Var) -> Result<Var> {
        if self.variant() != ModelVariant::Davse {
            return Err(Error::Config("fusion only exists in the davse model".into()));
        }
        let (a, b) = (g.value(vi).shape().to_vec(), g.value(vs).shape().to_vec());
        if a[0] != b[0] || a[2] != b[2] {
            return Err(Error::Shape(format!("cannot fuse embeddings of shapes {a:?} and {b:?}")));
        }
        let vis = g.concat(vi, vs);
        let (w, bias) = (self.p(g, "fusion.w"), self.p(g, "fusion.b"));
        Ok(g.pointwise(vis, w, Some(bias)))
    }

    /// Speaker logits `[B, C, T]` from identity embeddings `[B, N, T]`.
    pub fn classifier_graph(&self, g: &mut Graph, v_ie: Var) -> Result<Var> {
        if self.variant() != ModelVariant::Spk {
            return Err(Error::Config("only the spk model has a speaker classifier".into()));
        }
        let w = self.p(g, "classifier.w");
        Ok(g.pointwise(v_ie, w, None))
    }

    /// Encoder, visual conditioning, mask estimation and decoder on a
    /// `[B, n]` batch of mixtures.
    pub fn extract_graph(&self, g: &mut Graph, mixture: &Tensor, v: Var, mode: MaskMode) -> Result<ExtractVars> {
        let c = &self.config;
        let n = mixture.dim(1);
        let t_a = c.latent_frames(n)?;
        let vshape = g.value(v).shape().to_vec();
        if vshape[0] != mixture.dim(0) || vshape[1] != c.extractor_visual_dim() {
            return Err(Error::Shape(format!("visual embedding {vshape:?} does not fit the mixture batch")));
        }
        let x = g.input(mixture.clone());
        let frames = g.frame(x, c.audio_kernel, c.audio_stride);
        let we = self.p(g, "audio_encoder.w");
        let latent = g.pointwise(frames, we, None);
        let latent = g.relu(latent);

        let (gam, bet) = (self.p(g, "extractor.ln_g"), self.p(g, "extractor.ln_b"));
        let y = g.global_layer_norm(latent, gam, bet);
        let w = self.p(g, "extractor.in_w");
        let y = g.pointwise(y, w, None);
        let vu = g.upsample(v, c.upsample_ratio(), t_a);
        let y = g.concat(y, vu);
        let (w, b) = (self.p(g, "extractor.av_w"), self.p(g, "extractor.av_b"));
        let mut y = g.pointwise(y, w, Some(b));
        for r in 0..c.tcn.repeats {
            for xb in 0..c.tcn.blocks_per_repeat {
                let pre = format!("extractor.r{r}b{xb}");
                let (w, b) = (self.p(g, &format!("{pre}.in_w")), self.p(g, &format!("{pre}.in_b")));
                let h = g.pointwise(y, w, Some(b));
                let a = self.p(g, &format!("{pre}.a1"));
                let h = g.prelu(h, a);
                let (gam, bet) = (self.p(g, &format!("{pre}.ln1_g")), self.p(g, &format!("{pre}.ln1_b")));
                let h = g.global_layer_norm(h, gam, bet);
                let (w, b) = (self.p(g, &format!("{pre}.dw")), self.p(g, &format!("{pre}.dw_b")));
                let h = g.depthwise(h, w, Some(b), 1 << xb);
                let a = self.p(g, &format!("{pre}.a2"));
                let h = g.prelu(h, a);
                let (gam, bet) = (self.p(g, &format!("{pre}.ln2_g")), self.p(g, &format!("{pre}.ln2_b")));
                let h = g.global_layer_norm(h, gam, bet);
                let (w, b) = (self.p(g, &format!("{pre}.out_w")), self.p(g, &format!("{pre}.out_b")));
                let h = g.pointwise(h, w, Some(b));
                y = g.add(y, h);
            }
        }
        let a = self.p(g, "extractor.mask_a");
        let h = g.prelu(y, a);
        let (w, b) = (self.p(g, "extractor.mask_w"), self.p(g, "extractor.mask_b"));
        let h = g.pointwise(h, w, Some(b));
        let mask = match mode {
            MaskMode::Learned => g.sigmoid(h),
            MaskMode::Ones => g.input(Tensor::full(g.value(h).shape(), 1.0)),
            MaskMode::Zeros => g.input(Tensor::zeros(g.value(h).shape())),
        };
        let masked = g.mul(latent, mask);
        let wd = self.p(g, "audio_decoder.w");
        let dec = g.pointwise(masked, wd, None);
        let estimate = g.overlap_add(dec, c.audio_stride, n);
        Ok(ExtractVars { latent, mask, estimate })
    }

    pub fn encode_audio(&self, wave: &Waveform) -> Result<LatentAudio> {
        let c = &self.config;
        c.latent_frames(wave.len())?;
        let mut g = Graph::new(false);
        let x = g.input(Tensor::from_vec(&[1, wave.len()], wave.samples().to_vec()));
        let frames = g.frame(x, c.audio_kernel, c.audio_stride);
        let w = self.p(&mut g, "audio_encoder.w");
        let l = g.pointwise(frames, w, None);
        let l = g.relu(l);
        Ok(LatentAudio { frames: EmbeddingSequence::from_channels_first(g.value(l), EmbeddingTag::V).features })
    }

    /// Runs one visual branch (in inference mode) on a single stream.
    pub fn visual_frontend(&self, video: &VideoStream, branch: VisualBranch) -> Result<EmbeddingSequence> {
        let t = self.video_tensor(&[video])?;
        let mut g = Graph::new(false);
        let v = self.branch_graph(&mut g, &t, branch)?;
        let tag = match (self.variant(), branch) {
            (_, VisualBranch::Joint) => EmbeddingTag::V,
            (ModelVariant::Davse, VisualBranch::Identity) => EmbeddingTag::VI,
            (ModelVariant::Davse, VisualBranch::Sync) => EmbeddingTag::VS,
            (_, VisualBranch::Identity) => EmbeddingTag::VIE,
            (_, VisualBranch::Sync) => EmbeddingTag::VSE,
        };
        Ok(EmbeddingSequence::from_channels_first(g.value(v), tag))
    }

    /// Fuses `V_I` and `V_S` into `V` (davse only).
    pub fn fuse(&self, v_i: &EmbeddingSequence, v_s: &EmbeddingSequence) -> Result<EmbeddingSequence> {
        if v_i.len() != v_s.len() {
            return Err(Error::Shape(format!("cannot fuse sequences of length {} and {}", v_i.len(), v_s.len())));
        }
        let d = self.config.visual_dim;
        if v_i.dim() != d || v_s.dim() != d {
            return Err(Error::Shape(format!("fusion expects width {d}, got {} and {}", v_i.dim(), v_s.dim())));
        }
        let mut g = Graph::new(false);
        let (a, b) = (g.input(v_i.channels_first()), g.input(v_s.channels_first()));
        let v = self.fuse_graph(&mut g, a, b)?;
        Ok(EmbeddingSequence::from_channels_first(g.value(v), EmbeddingTag::V))
    }

    /// The embedding `V` that conditions extraction for this video.
    pub fn embedding(&self, video: &VideoStream) -> Result<EmbeddingSequence> {
        let t = self.video_tensor(&[video])?;
        let mut g = Graph::new(false);
        let v = self.visual_graph(&mut g, Some(&t), &BranchFeatures::new())?;
        Ok(EmbeddingSequence::from_channels_first(g.value(v), EmbeddingTag::V))
    }

    pub fn extract(&self, mixture: &Waveform, visual: &VideoStream) -> Result<Extraction> {
        self.extract_with(mixture, visual, MaskMode::Learned)
    }

    pub fn extract_with(&self, mixture: &Waveform, visual: &VideoStream, mode: MaskMode) -> Result<Extraction> {
        let t = self.video_tensor(&[visual])?;
        let mut g = Graph::new(false);
        let v = self.visual_graph(&mut g, Some(&t), &BranchFeatures::new())?;
        let x = Tensor::from_vec(&[1, mixture.len()], mixture.samples().to_vec());
        let out = self.extract_graph(&mut g, &x, v, mode)?;
        Ok(Extraction {
            estimate: Waveform::new(g.value(out.estimate).data().to_vec(), mixture.sample_rate())?,
            mask: EmbeddingSequence::from_channels_first(g.value(out.mask), EmbeddingTag::V).features,
            v: EmbeddingSequence::from_channels_first(g.value(v), EmbeddingTag::V),
        })
    }

    pub fn classifier_head(&self) -> Option<SpkClassifierHead> {
        let id = self.params.id("classifier.w")?;
        let w = self.params.value(id);
        Some(SpkClassifierHead { w: transpose(w.data(), w.dim(0), w.dim(1)) })
    }
}

fn add_branch(p: &mut ParamStore, c: &ModelConfig, branch: VisualBranch, rng: &mut ChaCha8Rng) {
    let gr = branch.group();
    let [c0, c1, c2, c3] = FRONTEND_CHANNELS;
    let k3 = c.visual_temporal_kernel * CONV3D_KERNEL * CONV3D_KERNEL;
    p.add_uniform(gr, "conv3d.w", &[c0, k3], k3, rng);
    p.add_const(gr, "conv3d.b", &[c0], 0.0);
    for (l, (cin, cout)) in [(c0, c1), (c1, c2), (c2, c3)].into_iter().enumerate() {
        let fan = cin * CONV2D_KERNEL * CONV2D_KERNEL;
        p.add_uniform(gr, &format!("conv{l}.w"), &[cout, fan], fan, rng);
        p.add_const(gr, &format!("conv{l}.b"), &[cout], 0.0);
    }
    let n = c.branch_dim(branch);
    p.add_uniform(gr, "proj.w", &[n, c3], c3, rng);
    p.add_const(gr, "proj.b", &[n], 0.0);
    for l in 0..TEMPORAL_LAYERS {
        p.add_const(gr, &format!("tb{l}.bn_g"), &[n], 1.0);
        p.add_const(gr, &format!("tb{l}.bn_b"), &[n], 0.0);
        p.add_buffer(gr, &format!("tb{l}.bn_mean"), &[n], 0.0);
        p.add_buffer(gr, &format!("tb{l}.bn_var"), &[n], 1.0);
        p.add_uniform(gr, &format!("tb{l}.dw"), &[n, 3], 3, rng);
        p.add_const(gr, &format!("tb{l}.dw_b"), &[n], 0.0);
        p.add_uniform(gr, &format!("tb{l}.pw"), &[n, n], n, rng);
        p.add_const(gr, &format!("tb{l}.pw_b"), &[n], 0.0);
    }
}

fn add_extractor(p: &mut ParamStore, c: &ModelConfig, rng: &mut ChaCha8Rng) {
    let gr = "extractor";
    let (na, b, h, d) = (c.n_audio_filters, c.tcn.bottleneck, c.tcn.hidden, c.extractor_visual_dim());
    p.add_const(gr, "ln_g", &[na], 1.0);
    p.add_const(gr, "ln_b", &[na], 0.0);
    p.add_uniform(gr, "in_w", &[b, na], na, rng);
    p.add_uniform(gr, "av_w", &[b, b + d], b + d, rng);
    p.add_const(gr, "av_b", &[b], 0.0);
    for r in 0..c.tcn.repeats {
        for x in 0..c.tcn.blocks_per_repeat {
            let pre = format!("r{r}b{x}");
            p.add_uniform(gr, &format!("{pre}.in_w"), &[h, b], b, rng);
            p.add_const(gr, &format!("{pre}.in_b"), &[h], 0.0);
            p.add_const(gr, &format!("{pre}.a1"), &[1], PRELU_INIT);
            p.add_const(gr, &format!("{pre}.ln1_g"), &[h], 1.0);
            p.add_const(gr, &format!("{pre}.ln1_b"), &[h], 0.0);
            p.add_uniform(gr, &format!("{pre}.dw"), &[h, c.tcn.kernel], c.tcn.kernel, rng);
            p.add_const(gr, &format!("{pre}.dw_b"), &[h], 0.0);
            p.add_const(gr, &format!("{pre}.a2"), &[1], PRELU_INIT);
            p.add_const(gr, &format!("{pre}.ln2_g"), &[h], 1.0);
            p.add_const(gr, &format!("{pre}.ln2_b"), &[h], 0.0);
            // Small residual branches at initialisation keep the stack well conditioned.
            p.add_uniform(gr, &format!("{pre}.out_w"), &[b, h], 4 * h, rng);
            p.add_const(gr, &format!("{pre}.out_b"), &[b], 0.0);
        }
    }
    p.add_const(gr, "mask_a", &[1], PRELU_INIT);
    p.add_uniform(gr, "mask_w", &[na, b], b, rng);
    p.add_const(gr, "mask_b", &[na], 0.0);
}

#[cfg(test)]
mod tests;
