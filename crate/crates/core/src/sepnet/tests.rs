use super::*;
use crate::avcorpus::{make_speaker, synth_utterance, Group};
use crate::nn::Adam;
use proptest::prelude::*;
use rand::Rng;

fn small_config(variant: ModelVariant) -> ModelConfig {
    ModelConfig {
        variant,
        n_audio_filters: 16,
        visual_dim: 8,
        tcn: TcnConfig { bottleneck: 8, hidden: 16, blocks_per_repeat: 2, repeats: 1, kernel: 3 },
        ..ModelConfig::default()
    }
}

fn random_video(frames: usize, seed: u64) -> VideoStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..frames * 32 * 32).map(|_| rng.random_range(0.0..1.0)).collect();
    VideoStream::new(data, frames, 32, 25, VisualField::Face).unwrap()
}

fn random_wave(n: usize, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform::new((0..n).map(|_| rng.random_range(-0.5..0.5)).collect(), 8000).unwrap()
}

#[test]
fn encoder_shapes() {
    let m = SeparationModel::new(ModelConfig::default(), 0, 1).unwrap();
    let l = m.encode_audio(&random_wave(8000, 2)).unwrap();
    assert_eq!(l.frames.shape(), &[499, 128]);
    assert!(l.frames.all_finite());
    assert!(matches!(m.encode_audio(&random_wave(31, 2)), Err(Error::InputTooShort { len: 31, kernel: 32 })));
}

#[test]
fn branch_widths() {
    let v = random_video(100, 3);
    let sync = SeparationModel::new(ModelConfig::with_variant(ModelVariant::Sync), 0, 1).unwrap();
    let e = sync.visual_frontend(&v, VisualBranch::Sync).unwrap();
    assert_eq!(e.features.shape(), &[100, 64]);
    assert_eq!(e.tag, EmbeddingTag::VSE);
    let base = SeparationModel::new(ModelConfig::with_variant(ModelVariant::Baseline), 0, 1).unwrap();
    let j = base.visual_frontend(&v.slice(0, 10), VisualBranch::Joint).unwrap();
    assert_eq!(j.dim(), 2 * e.dim());
    assert!(matches!(sync.visual_frontend(&v, VisualBranch::Identity), Err(Error::Config(_))));
    let small = VideoStream::new(vec![0.0; 4 * 16 * 16], 4, 16, 25, VisualField::Face).unwrap();
    assert!(matches!(sync.visual_frontend(&small, VisualBranch::Sync), Err(Error::Shape(_))));
}

#[test]
fn frontend_is_frame_equivariant_with_unit_temporal_kernel() {
    let cfg = ModelConfig { visual_temporal_kernel: 1, ..small_config(ModelVariant::Sync) };
    let m = SeparationModel::new(cfg, 0, 4).unwrap();
    let v = random_video(6, 5);
    let perm = [3usize, 0, 5, 1, 4, 2];
    let mut shuffled = Vec::new();
    for &p in &perm {
        shuffled.extend_from_slice(v.frame(p));
    }
    let vp = VideoStream::new(shuffled, 6, 32, 25, VisualField::Face).unwrap();
    let run = |video: &VideoStream| {
        let mut g = Graph::new(false);
        let t = m.video_tensor(&[video]).unwrap();
        let x = m.frontend_graph(&mut g, &t, VisualBranch::Sync);
        g.value(x).clone()
    };
    let (a, b) = (run(&v), run(&vp));
    let n = a.dim(1);
    for c in 0..n {
        for (j, &p) in perm.iter().enumerate() {
            assert_eq!(b.data()[c * 6 + j].to_bits(), a.data()[c * 6 + p].to_bits());
        }
    }
}

#[test]
fn upsampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let feats = Tensor::from_vec(&[100, 3], (0..300).map(|_| rng.random_range(-1.0..1.0)).collect());
    let e = EmbeddingSequence { features: feats, tag: EmbeddingTag::V };
    assert_eq!(upsample_visual(&e, 20).unwrap().len(), 2000);
    assert_eq!(upsample_visual(&e, 1).unwrap(), e);
    let c = EmbeddingSequence { features: Tensor::full(&[7, 2], 0.375), tag: EmbeddingTag::V };
    assert!(upsample_visual(&c, 20).unwrap().features.data().iter().all(|&v| v == 0.375));
    assert!(upsample_visual(&e, 0).is_err());
}

#[test]
fn fusion_widths_and_length_check() {
    let m = SeparationModel::new(ModelConfig::with_variant(ModelVariant::Davse), 0, 1).unwrap();
    let seq = |l: usize, tag| EmbeddingSequence { features: Tensor::full(&[l, 64], 0.1), tag };
    let v = m.fuse(&seq(100, EmbeddingTag::VI), &seq(100, EmbeddingTag::VS)).unwrap();
    assert_eq!(v.features.shape(), &[100, 64]);
    assert_eq!(m.params.value(m.pid("fusion.w")).shape(), &[64, 128]);
    assert!(matches!(m.fuse(&seq(100, EmbeddingTag::VI), &seq(99, EmbeddingTag::VS)), Err(Error::Shape(_))));
}

/// Direct decoder oracle: `decode(encode(x))` with a unit mask.
fn decode_encode(m: &SeparationModel, x: &[f32]) -> Vec<f32> {
    let c = &m.config;
    let (k, s, na) = (c.audio_kernel, c.audio_stride, c.n_audio_filters);
    let we = m.params.value(m.pid("audio_encoder.w")).data();
    let wd = m.params.value(m.pid("audio_decoder.w")).data();
    let t_a = (x.len() - k) / s + 1;
    let mut out = vec![0f64; x.len()];
    for t in 0..t_a {
        let lat: Vec<f64> = (0..na)
            .map(|f| (0..k).map(|i| we[f * k + i] as f64 * x[t * s + i] as f64).sum::<f64>().max(0.0))
            .collect();
        for i in 0..k {
            out[t * s + i] += (0..na).map(|f| wd[i * na + f] as f64 * lat[f]).sum::<f64>();
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

#[test]
fn mask_overrides() {
    for variant in ModelVariant::ALL {
        let m = SeparationModel::new(small_config(variant), 4, 7).unwrap();
        let x = random_wave(25 * 320, 8);
        let a = m.extract_with(&x, &random_video(25, 9), MaskMode::Ones).unwrap();
        let b = m.extract_with(&x, &random_video(25, 10), MaskMode::Ones).unwrap();
        assert_eq!(a.estimate, b.estimate);
        let oracle = decode_encode(&m, x.samples());
        for (e, o) in a.estimate.samples().iter().zip(&oracle) {
            assert!((e - o).abs() < 1e-4, "{e} vs {o}");
        }
        let z = m.extract_with(&x, &random_video(25, 9), MaskMode::Zeros).unwrap();
        assert!(z.estimate.samples().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn classifier_head() {
    let head = SpkClassifierHead { w: Tensor::zeros(&[3, 4]) };
    let v = EmbeddingSequence { features: Tensor::full(&[10, 3], 0.7), tag: EmbeddingTag::VIE };
    let logits = classify_frames(&head, &v).unwrap();
    assert_eq!(logits.shape(), &[10, 4]);
    assert!(logits.data().iter().all(|&l| l == 0.0));

    let head = SpkClassifierHead { w: Tensor::from_vec(&[2, 2], vec![1.0, 2.0, -0.5, 3.0]) };
    let v = EmbeddingSequence { features: Tensor::from_vec(&[2, 2], vec![2.0, 1.0, 0.0, -1.0]), tag: EmbeddingTag::VIE };
    // [2, 1] · [[1, 2], [-0.5, 3]] = [1.5, 7]; [0, -1] · ... = [0.5, -3]
    assert_eq!(classify_frames(&head, &v).unwrap().data(), &[1.5, 7.0, 0.5, -3.0]);
    let wrong = EmbeddingSequence { features: Tensor::zeros(&[2, 5]), tag: EmbeddingTag::VIE };
    assert!(matches!(classify_frames(&head, &wrong), Err(Error::Shape(_))));

    let m = SeparationModel::new(small_config(ModelVariant::Spk), 5, 1).unwrap();
    assert_eq!(m.classifier_head().unwrap().n_classes(), 5);
    assert!(SeparationModel::new(small_config(ModelVariant::Spk), 1, 1).is_err());
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let mut m = SeparationModel::new(small_config(ModelVariant::Spk), 6, 3).unwrap();
    m.params.freeze("identity_visual");
    m.training_step = 42;
    let bytes = m.to_bytes().unwrap();
    let back = SeparationModel::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(back.frozen_set(), vec!["identity_visual".to_string()]);
    assert_eq!(back.training_step, 42);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(SeparationModel::from_bytes(&bad), Err(Error::Checkpoint(_))));
    assert!(matches!(SeparationModel::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));

    let mut davse = SeparationModel::new(small_config(ModelVariant::Davse), 0, 1).unwrap();
    davse.load_branch_from(&m, VisualBranch::Identity).unwrap();
    let wide = SeparationModel::new(ModelConfig { visual_dim: 16, ..small_config(ModelVariant::Sync) }, 0, 1).unwrap();
    assert!(matches!(davse.load_branch_from(&wide, VisualBranch::Sync), Err(Error::Checkpoint(_))));
}

#[test]
fn davse_frozen_branches_survive_optimizer_steps() {
    let mut m = SeparationModel::new(small_config(ModelVariant::Davse), 0, 11).unwrap();
    assert_eq!(m.frozen_set(), vec!["identity_visual".to_string(), "sync_visual".to_string()]);
    assert!(m.params.trainable_count() < m.params.total_count());
    let before = m.params.clone();
    let mut opt = Adam::default();
    let x = random_wave(10 * 320, 1);
    let video = random_video(10, 2);
    for _ in 0..3 {
        let mut g = Graph::new(true);
        let vt = m.video_tensor(&[&video]).unwrap();
        let v = m.visual_graph(&mut g, Some(&vt), &BranchFeatures::new()).unwrap();
        let mix = Tensor::from_vec(&[1, x.len()], x.samples().to_vec());
        let out = m.extract_graph(&mut g, &mix, v, MaskMode::Learned).unwrap();
        let est = g.value(out.estimate).clone();
        let grad = Tensor::from_vec(est.shape(), est.data().iter().map(|v| 2.0 * v).collect());
        g.backward(out.estimate, grad);
        let updates = g.take_bn_updates();
        m.params.apply_bn_updates(updates, 0.1);
        let grads = g.param_grads();
        opt.step(&mut m.params, &grads, 1e-2);
    }
    let mut changed = false;
    for (a, b) in before.entries().iter().zip(m.params.entries()) {
        if m.params.is_frozen(&a.group) {
            assert!(a.value.bit_eq(&b.value), "{} changed", a.name);
        } else if !a.value.bit_eq(&b.value) {
            changed = true;
        }
    }
    assert!(changed);
}

#[test]
fn forward_is_deterministic_on_corpus_input() {
    let p = make_speaker(3, 0, Group::High);
    let u = synth_utterance(&p, 9, 4.0).unwrap();
    let m = SeparationModel::new(small_config(ModelVariant::Baseline), 0, 2).unwrap();
    let a = m.extract(&u.audio, &u.video).unwrap();
    let b = m.extract(&u.audio, &u.video).unwrap();
    assert_eq!(a.estimate, b.estimate);
    assert_eq!(a.v.len(), u.video.n_frames());
    let mouth = SeparationModel::new(ModelConfig { visual_field: VisualField::Mouth, ..small_config(ModelVariant::Sync) }, 0, 2).unwrap();
    assert_eq!(mouth.extract(&u.audio, &u.video).unwrap().estimate.len(), u.audio.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]
    #[test]
    fn output_length_and_mask_bounds(frames in 100usize..=150, seed in 0u64..1000) {
        let m = SeparationModel::new(small_config(ModelVariant::Sync), 0, seed).unwrap();
        let x = random_wave(frames * 320 - (seed as usize % 7), seed);
        let ex = m.extract(&x, &random_video(frames, seed)).unwrap();
        prop_assert_eq!(ex.estimate.len(), x.len());
        prop_assert!(ex.mask.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!(ex.estimate.samples().iter().all(|v| v.is_finite()));
    }
}
