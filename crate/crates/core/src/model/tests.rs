use super::*;
use crate::data::captions;

/// A scaled-down config for fast unit tests: 8×8 frames (4 patches),
/// d_model 16, one block per stack.
pub(crate) fn tiny_config() -> ModelConfig {
    ModelConfig {
        frame_height: 8,
        frame_width: 8,
        channels: 3,
        patch_size: 4,
        d_model: 16,
        n_heads: 2,
        encoder_blocks: 1,
        decoder_blocks: 1,
        vocab_size: captions::vocab().len(),
        max_caption_len: 8,
        max_frames: 6,
        t_diff: 10,
        lora_encoder_blocks: vec![0],
        lora_decoder_blocks: vec![0],
    }
}

/// Deterministic pseudo-random frame stack of shape `(frames, c, h, w)`.
pub(crate) fn random_frames<E: Scalar>(frames: usize, cfg: &ModelConfig, seed: u64) -> Tensor<E> {
    let mut rng = StreamRng::new(seed, "test/frames");
    let n = frames * cfg.channels * cfg.frame_height * cfg.frame_width;
    let data = (0..n).map(|_| E::from_f64_lossy(rng.normal() * 0.5)).collect();
    Tensor::from_vec(
        &[frames, cfg.channels, cfg.frame_height, cfg.frame_width],
        data,
    )
    .unwrap()
}

fn single_frame<E: Scalar>(cfg: &ModelConfig, seed: u64) -> Tensor<E> {
    random_frames::<E>(1, cfg, seed)
        .reshape(&[cfg.channels, cfg.frame_height, cfg.frame_width])
        .unwrap()
}

#[test]
fn default_config_is_valid_and_digest_is_stable() {
    let cfg = ModelConfig::default();
    cfg.validate().unwrap();
    assert_eq!(cfg.digest(), cfg.digest());
    assert_eq!(cfg.digest().len(), 64);

    let mut other = cfg.clone();
    other.n_heads = 8;
    assert_ne!(cfg.digest(), other.digest());
}

#[test]
fn config_validation_catches_bad_geometry() {
    let mut cfg = tiny_config();
    cfg.frame_width = 10; // not divisible by patch 4
    assert!(cfg.validate().is_err());

    let mut cfg = tiny_config();
    cfg.n_heads = 3; // 16 % 3 != 0
    assert!(cfg.validate().is_err());

    let mut cfg = tiny_config();
    cfg.lora_encoder_blocks = vec![1]; // only block 0 exists
    assert!(cfg.validate().is_err());

    let mut cfg = tiny_config();
    cfg.lora_decoder_blocks = vec![0, 0]; // must be strictly ascending
    assert!(cfg.validate().is_err());

    let mut cfg = tiny_config();
    cfg.t_diff = 0;
    assert!(cfg.validate().is_err());
}

#[test]
fn projection_names_round_trip() {
    for (name, text) in [
        (ProjName { stage: Stage::Encoder, block: 0, role: Role::Q }, "enc.0.cross.q"),
        (ProjName { stage: Stage::Decoder, block: 3, role: Role::V }, "dec.3.cross.v"),
        (ProjName { stage: Stage::Encoder, block: 12, role: Role::K }, "enc.12.cross.k"),
    ] {
        assert_eq!(name.to_string(), text);
        assert_eq!(text.parse::<ProjName>().unwrap(), name);
    }
    for bad in ["enc.0.self.q", "foo.0.cross.q", "enc.x.cross.q", "enc.0.cross.w", "enc.0.q"] {
        assert!(bad.parse::<ProjName>().is_err(), "{bad} should not parse");
    }
}

#[test]
fn construction_is_deterministic_in_the_seed() {
    let a = VideoDit::<f32>::new(tiny_config(), 42).unwrap();
    let b = VideoDit::<f32>::new(tiny_config(), 42).unwrap();
    let c = VideoDit::<f32>::new(tiny_config(), 43).unwrap();
    let collect = |m: &VideoDit<f32>| {
        m.named_parameters()
            .into_iter()
            .map(|(n, t)| (n, t.with_data(|d| d.to_vec())))
            .collect::<Vec<_>>()
    };
    assert_eq!(collect(&a), collect(&b));
    assert_ne!(collect(&a), collect(&c));
}

#[test]
fn every_base_parameter_is_frozen() {
    let m = VideoDit::<f32>::new(tiny_config(), 1).unwrap();
    for (name, p) in m.named_parameters() {
        assert!(!p.requires_grad(), "{name} must be frozen");
    }
}

#[test]
fn parameter_count_matches_closed_form() {
    let cfg = ModelConfig::default();
    let m = VideoDit::<f32>::new(cfg.clone(), 0).unwrap();
    let d = cfg.d_model;
    let pd = cfg.channels * cfg.patch_size * cfg.patch_size;
    let p = (cfg.frame_height / cfg.patch_size) * (cfg.frame_width / cfg.patch_size);
    // Per block: three layer norms (2d each), two attentions (4·d² each),
    // and an MLP (8·d² + 5d).
    let per_block = 6 * d + 8 * d * d + 8 * d * d + 5 * d;
    let expected = (d * pd + d)                       // patch projection
        + (p * d + cfg.max_frames * d)                // position tables
        + cfg.vocab_size * d                          // caption embedding
        + (cfg.encoder_blocks + cfg.decoder_blocks) * per_block
        + (2 * d + pd * d + pd);                      // head
    assert_eq!(m.param_count(), expected);
}

#[test]
fn named_parameters_and_projections_are_stable() {
    let m = VideoDit::<f32>::new(tiny_config(), 1).unwrap();
    let names: Vec<String> = m.named_parameters().into_iter().map(|(n, _)| n).collect();
    assert_eq!(names.len(), m.named_parameters().len());
    let mut sorted = names.clone();
    sorted.dedup();
    assert_eq!(sorted.len(), names.len(), "parameter names must be unique");
    assert!(names.contains(&"enc.0.cross.q".to_string()));
    assert!(names.contains(&"dec.0.mlp.w2".to_string()));

    let projections = m.named_projections();
    assert_eq!(projections.len(), 6); // (1 enc + 1 dec) × q/k/v
    assert_eq!(projections[0].0.to_string(), "enc.0.cross.q");
    assert_eq!(projections[0].1.name(), "enc.0.cross.q");
    assert!(m.projection("dec.0.cross.k".parse().unwrap()).is_ok());
    assert!(m.projection("dec.5.cross.k".parse().unwrap()).is_err());
}

#[test]
fn denoise_returns_window_shaped_noise() {
    let cfg = tiny_config();
    let m = VideoDit::<f32>::new(cfg.clone(), 1).unwrap();
    let caption = m.encode_caption(&[1, 2, 3]).unwrap();
    let first = single_frame::<f32>(&cfg, 2);
    for frames in [1, 3] {
        let window = random_frames::<f32>(frames, &cfg, 3);
        let out = m.denoise(&window, 5, &caption, &first).unwrap();
        assert_eq!(out.shape(), window.shape());
        out.with_data(|d| assert!(d.iter().all(|v| v.is_finite())));
    }
}

#[test]
fn denoise_validates_inputs() {
    let cfg = tiny_config();
    let m = VideoDit::<f32>::new(cfg.clone(), 1).unwrap();
    let caption = m.null_caption().unwrap();
    let first = single_frame::<f32>(&cfg, 2);
    let window = random_frames::<f32>(2, &cfg, 3);

    // Window with wrong frame geometry.
    let bad = Tensor::<f32>::zeros(&[2, 3, 8, 4]).unwrap();
    assert!(m.denoise(&bad, 0, &caption, &first).is_err());
    // Missing frame axis entirely.
    let flat = Tensor::<f32>::zeros(&[3, 8, 8]).unwrap();
    assert!(m.denoise(&flat, 0, &caption, &first).is_err());
    // First frame with wrong shape.
    let bad_first = Tensor::<f32>::zeros(&[3, 4, 8]).unwrap();
    assert!(m.denoise(&window, 0, &caption, &bad_first).is_err());
    // Timestep beyond the horizon.
    assert!(m.denoise(&window, cfg.t_diff, &caption, &first).is_err());
    // Too many frames for the temporal table.
    let long = random_frames::<f32>(cfg.max_frames + 1, &cfg, 4);
    assert!(m.denoise(&long, 0, &caption, &first).is_err());
}

#[test]
fn caption_encoding_validates_and_marks_null() {
    let cfg = tiny_config();
    let m = VideoDit::<f32>::new(cfg.clone(), 1).unwrap();

    let enc = m.encode_caption(&[4, 7, 2]).unwrap();
    assert_eq!(enc.ids, vec![4, 7, 2]);
    assert_eq!(enc.tokens.shape(), [3, cfg.d_model]);
    assert!(!enc.is_null);

    let null = m.null_caption().unwrap();
    assert!(null.is_null);
    assert_eq!(null.ids, vec![NULL_TOKEN]);
    assert_eq!(null.tokens.shape(), [1, cfg.d_model]);

    let too_long: Vec<u32> = (0..cfg.max_caption_len as u32 + 1).collect();
    assert!(m.encode_caption(&too_long).is_err());
    assert!(m.encode_caption(&[cfg.vocab_size as u32]).is_err());
}

#[test]
fn timestep_embedding_has_sine_cosine_layout() {
    let m = VideoDit::<f32>::new(tiny_config(), 1).unwrap();
    let d = m.config().d_model;
    let at_zero = m.timestep_embedding(0).unwrap();
    at_zero.with_data(|v| {
        assert!(v[..d / 2].iter().all(|&x| x == 0.0), "sin(0) half");
        assert!(v[d / 2..].iter().all(|&x| x == 1.0), "cos(0) half");
    });
    // Highest frequency is 1 rad/step: first sine slot is sin(t).
    let at_three = m.timestep_embedding(3).unwrap();
    at_three.with_data(|v| {
        assert!((v[0] - (3f64).sin() as f32).abs() < 1e-6);
        assert!((v[d / 2] - (3f64).cos() as f32).abs() < 1e-6);
    });
}

#[test]
fn conditioning_signals_change_the_output() {
    let cfg = tiny_config();
    let m = VideoDit::<f32>::new(cfg.clone(), 1).unwrap();
    let window = random_frames::<f32>(2, &cfg, 3);
    let first = single_frame::<f32>(&cfg, 2);
    let caption = m.encode_caption(&[1, 2]).unwrap();
    let base = m.denoise(&window, 4, &caption, &first).unwrap().with_data(|d| d.to_vec());

    let other_t = m.denoise(&window, 5, &caption, &first).unwrap().with_data(|d| d.to_vec());
    assert_ne!(base, other_t, "timestep must condition the output");

    let other_caption = m.encode_caption(&[9, 8]).unwrap();
    let recaptioned = m
        .denoise(&window, 4, &other_caption, &first)
        .unwrap()
        .with_data(|d| d.to_vec());
    assert_ne!(base, recaptioned, "caption must condition the output");

    let other_first = single_frame::<f32>(&cfg, 77);
    let reanchored = m
        .denoise(&window, 4, &caption, &other_first)
        .unwrap()
        .with_data(|d| d.to_vec());
    assert_ne!(base, reanchored, "first frame must condition the output");
}

#[test]
fn checkpoint_round_trip_preserves_everything() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    let cfg = tiny_config();
    let m = VideoDit::<f32>::new(cfg.clone(), 11).unwrap();
    m.save(&path).unwrap();
    let loaded = VideoDit::<f32>::load(&path).unwrap();

    assert_eq!(loaded.config(), &cfg);
    let params = m.named_parameters();
    let loaded_params = loaded.named_parameters();
    assert_eq!(params.len(), loaded_params.len());
    for ((name, t), (lname, lt)) in params.iter().zip(&loaded_params) {
        assert_eq!(name, lname);
        assert_eq!(
            t.with_data(|d| d.to_vec()),
            lt.with_data(|d| d.to_vec()),
            "parameter {name} changed across save/load"
        );
        assert!(!lt.requires_grad());
    }

    let window = random_frames::<f32>(2, &cfg, 3);
    let first = single_frame::<f32>(&cfg, 2);
    let caption = m.encode_caption(&[5]).unwrap();
    let a = m.denoise(&window, 1, &caption, &first).unwrap().with_data(|d| d.to_vec());
    let caption2 = loaded.encode_caption(&[5]).unwrap();
    let b = loaded.denoise(&window, 1, &caption2, &first).unwrap().with_data(|d| d.to_vec());
    assert_eq!(a, b);
}

#[test]
fn load_rejects_missing_and_unknown_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let m = VideoDit::<f32>::new(tiny_config(), 11).unwrap();

    let path = dir.path().join("extra.bin");
    m.save(&path).unwrap();
    let mut tampered = Artifact::load(&path).unwrap();
    tampered.insert_tensor("not.a.param", vec![1], vec![0.0]);
    tampered.save(&path).unwrap();
    let err = VideoDit::<f32>::load(&path).unwrap_err();
    assert!(err.to_string().contains("unknown tensors"), "{err}");

    let path2 = dir.path().join("shape.bin");
    m.save(&path2).unwrap();
    let mut reshaped = Artifact::load(&path2).unwrap();
    reshaped.insert_tensor("patch.b", vec![2], vec![0.0, 0.0]);
    reshaped.save(&path2).unwrap();
    assert!(VideoDit::<f32>::load(&path2).is_err());
}

#[test]
fn frames_are_independent_when_temporal_attention_is_identity() {
    let cfg = tiny_config();
    let m = VideoDit::<f32>::new(cfg.clone(), 9).unwrap();
    m.set_temporal_attention_identity(true);
    // The temporal position table is the only other frame-indexed signal;
    // zero it so every frame sees identical conditioning.
    m.pos_temporal.with_data_mut(|d| d.fill(0.0));

    let frames = 3;
    let window = random_frames::<f32>(frames, &cfg, 3);
    let first = single_frame::<f32>(&cfg, 2);
    let caption = m.encode_caption(&[1, 2]).unwrap();

    let frame_len = cfg.channels * cfg.frame_height * cfg.frame_width;
    let perm = [2usize, 0, 1];
    let permuted_data = window.with_data(|d| {
        let mut out = vec![0.0f32; d.len()];
        for (dst, &src) in perm.iter().enumerate() {
            out[dst * frame_len..(dst + 1) * frame_len]
                .copy_from_slice(&d[src * frame_len..(src + 1) * frame_len]);
        }
        out
    });
    let permuted = Tensor::from_vec(window.shape(), permuted_data).unwrap();

    let out = m.denoise(&window, 4, &caption, &first).unwrap().with_data(|d| d.to_vec());
    let out_perm = m.denoise(&permuted, 4, &caption, &first).unwrap().with_data(|d| d.to_vec());
    for (dst, &src) in perm.iter().enumerate() {
        assert_eq!(
            out_perm[dst * frame_len..(dst + 1) * frame_len],
            out[src * frame_len..(src + 1) * frame_len],
            "frame {src} must map to slot {dst} unchanged"
        );
    }

    // With temporal attention back on, frames do interact.
    m.set_temporal_attention_identity(false);
    let coupled = m.denoise(&permuted, 4, &caption, &first).unwrap().with_data(|d| d.to_vec());
    let mut unpermuted = vec![0.0f32; coupled.len()];
    for (dst, &src) in perm.iter().enumerate() {
        unpermuted[src * frame_len..(src + 1) * frame_len]
            .copy_from_slice(&coupled[dst * frame_len..(dst + 1) * frame_len]);
    }
    assert_ne!(unpermuted, out, "temporal attention must couple frames");
}
