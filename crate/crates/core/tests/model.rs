use fct::checkpoint;
use fct::model::{DeepSupervision, FctModel, ModelConfig, STAGE_NAMES};
use fct::nn::{build_with, Conv2d};
use fct::profile::{profile, profile_at, REFERENCE_PARAMS};
use fct::train::loss_and_grads;
use fct::data::SegmentationSample;
use fct::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(size: usize, ds: DeepSupervision) -> ModelConfig {
    ModelConfig {
        input_size: [size, size],
        deep_supervision: ds,
        ..ModelConfig::desk()
    }
}

fn random_image(n: usize, size: usize, ch: usize, seed: u64) -> Tensor<f32> {
    Tensor::uniform(vec![n, size, size, ch], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn output_shapes(model: &FctModel, x: &Tensor<f32>) -> Vec<Vec<usize>> {
    model.predict(x).unwrap().into_iter().map(|(_, t)| t.shape().to_vec()).collect()
}

#[test]
fn default_config_follows_the_stage_lists() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.stage_filters, vec![16, 32, 64, 128, 384, 128, 64, 32, 16]);
    assert_eq!(cfg.stage_heads, vec![2, 4, 8, 12, 16, 12, 8, 4, 2]);
    assert_eq!(cfg.deep_supervision, DeepSupervision::Partial);
    assert!(cfg.pyramid_inputs);
    let res: Vec<usize> = (0..9).map(|s| ModelConfig::stage_resolution(224, s)).collect();
    assert_eq!(res, vec![112, 56, 28, 14, 14, 28, 56, 112, 224]);
    // encoder stage i and decoder stage 7−i work at the same resolution
    for i in 0..4 {
        assert_eq!(res[i], res[7 - i]);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        ModelConfig { input_size: [60, 64], ..ModelConfig::desk() },
        ModelConfig { stage_heads: vec![2; 8], ..ModelConfig::desk() },
        ModelConfig { num_classes: 1, ..ModelConfig::desk() },
        ModelConfig { kv_strides: vec![3, 1, 1, 1, 1, 1, 1, 1, 1], ..ModelConfig::desk() },
    ];
    for cfg in bad {
        assert!(FctModel::new(cfg, 0).is_err());
    }
}

#[test]
fn bottleneck_head_width() {
    let model = FctModel::new(ModelConfig { input_size: [32, 32], ..Default::default() }, 0).unwrap();
    assert_eq!(model.bottleneck.attention.cfg.channels, 384);
    assert_eq!(model.bottleneck.attention.cfg.heads, 16);
    assert_eq!(model.bottleneck.attention.cfg.head_dim(), 24);
}

#[test]
fn output_scales_per_supervision_mode() {
    let x = random_image(1, 32, 1, 1);
    let expect = |ds, sizes: &[usize]| {
        let model = FctModel::new(small(32, ds), 0).unwrap();
        let want: Vec<Vec<usize>> = sizes.iter().map(|&s| vec![1, s, s, 4]).collect();
        assert_eq!(output_shapes(&model, &x), want, "{ds:?}");
    };
    expect(DeepSupervision::Partial, &[32, 16, 8]);
    expect(DeepSupervision::Full, &[32, 16, 8, 4]);
    expect(DeepSupervision::Off, &[32]);
}

#[test]
fn forward_rejects_wrong_input_shape() {
    let model = FctModel::new(small(32, DeepSupervision::Off), 0).unwrap();
    assert!(model.predict(&random_image(1, 16, 1, 0)).is_err());
    assert!(model.predict(&random_image(1, 32, 3, 0)).is_err());
}

#[test]
fn zero_input_gives_uniform_softmax() {
    for pyramid in [true, false] {
        let cfg = ModelConfig { pyramid_inputs: pyramid, ..small(32, DeepSupervision::Full) };
        let model = FctModel::new(cfg, 3).unwrap();
        for (_, logits) in model.predict(&Tensor::zeros(vec![1, 32, 32, 1])).unwrap() {
            assert!(logits.data().iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn multichannel_input_and_no_pyramid() {
    let cfg = ModelConfig {
        in_channels: 3,
        num_classes: 2,
        pyramid_inputs: false,
        ..small(16, DeepSupervision::Partial)
    };
    let model = FctModel::new(cfg, 0).unwrap();
    assert!(model.pyramid.is_empty());
    let shapes = output_shapes(&model, &random_image(2, 16, 3, 4));
    assert_eq!(shapes[0], vec![2, 16, 16, 2]);
}

#[test]
fn gradient_reaches_every_parameter() {
    // at 32×32 the coarsest attention still sees four tokens; a single token
    // makes the softmax constant and q/k gradients vanish identically
    let model = FctModel::new(small(32, DeepSupervision::Partial), 5).unwrap();
    for trial in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
        let samples: Vec<SegmentationSample> = (0..2)
            .map(|i| {
                let img = random_image(1, 32, 1, 10 * trial + i).reshape(vec![32, 32, 1]).unwrap();
                let mask = (0..1024).map(|_| rng.random_range(0..4u16)).collect();
                SegmentationSample::new(img, mask).unwrap()
            })
            .collect();
        let refs: Vec<&SegmentationSample> = samples.iter().collect();
        let (_, grads) = loss_and_grads(&model, &refs).unwrap();
        for ((_, name, _), g) in model.registry.iter().zip(&grads) {
            assert!(g.data().iter().any(|&v| v != 0.0), "trial {trial}: `{name}` has an all-zero gradient");
        }
    }
}

#[test]
fn single_conv_profile_example() {
    let (conv, reg) = build_with(0, |init| Conv2d::same(init, "c", 1, 1, 3)).unwrap();
    assert_eq!(conv.param_count(), 10);
    assert_eq!(reg.count(), 10);
    assert_eq!(conv.flops(4, 4), 288);
}

#[test]
fn default_profile_table_and_band() {
    let model = FctModel::new(ModelConfig::default(), 0).unwrap();
    let p = profile(&model);
    assert_eq!(p.stages.len(), 10);
    let names: Vec<&str> = p.stages.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(&names[..9], &STAGE_NAMES[..]);
    assert_eq!(names[9], "heads");
    let outs: Vec<usize> = p.stages[..9].iter().map(|s| s.output[0]).collect();
    assert_eq!(outs, vec![112, 56, 28, 14, 14, 28, 56, 112, 224]);
    assert_eq!(p.param_count, model.param_count());
    assert!((10_000_000..=40_000_000).contains(&p.param_count), "{}", p.param_count);
    let cmp = p.compare_reference();
    assert_eq!(cmp.reference_params, REFERENCE_PARAMS);
    assert!(p.table().contains("total params"));
}

#[test]
fn param_count_does_not_depend_on_input_size() {
    let a = FctModel::new(ModelConfig { input_size: [64, 64], ..Default::default() }, 0).unwrap();
    let b = FctModel::new(ModelConfig::default(), 0).unwrap();
    assert_eq!(a.param_count(), b.param_count());
    assert_eq!(profile_at(&b, [448, 448]).param_count, profile(&b).param_count);
}

#[test]
fn non_attention_flops_scale_with_area() {
    let model = FctModel::new(ModelConfig::default(), 0).unwrap();
    // attention score work per stage: q·kᵀ, A·v and the softmax
    let attention = |n: usize| -> u64 {
        model
            .stages()
            .enumerate()
            .map(|(i, (_, l))| {
                let c = &l.attention.cfg;
                let side = ModelConfig::stage_resolution(n, i);
                let tq = (side * side) as u64;
                let kv = side.div_ceil(c.kv_stride);
                let tkv = (kv * kv) as u64;
                (4 * tq * tkv * c.head_dim() as u64 + 10 * tq * tkv) * c.heads as u64
            })
            .sum()
    };
    let f224 = profile_at(&model, [224, 224]).flops - attention(224);
    let f448 = profile_at(&model, [448, 448]).flops - attention(448);
    let ratio = f448 as f64 / f224 as f64;
    assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let model = FctModel::new(small(16, DeepSupervision::Full), 11).unwrap();
    let manifest = checkpoint::save(&model, dir.path()).unwrap();
    assert_eq!(manifest.tensors.len(), model.registry.len());
    let loaded = checkpoint::load(dir.path()).unwrap();
    assert_eq!(loaded.cfg, model.cfg);
    let x = random_image(2, 16, 1, 12);
    let (a, b) = (model.predict(&x).unwrap(), loaded.predict(&x).unwrap());
    assert_eq!(a.len(), b.len());
    for ((_, ta), (_, tb)) in a.iter().zip(&b) {
        assert!(ta.data().iter().zip(tb.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn checkpoint_saves_are_byte_identical() {
    let model = FctModel::new(small(16, DeepSupervision::Partial), 2).unwrap();
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    checkpoint::save(&model, d1.path()).unwrap();
    checkpoint::save(&FctModel::new(small(16, DeepSupervision::Partial), 2).unwrap(), d2.path()).unwrap();
    let mut files: Vec<_> = std::fs::read_dir(d1.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    files.sort();
    assert_eq!(files.len(), model.registry.len() + 1);
    for f in files {
        let a = std::fs::read(d1.path().join(&f)).unwrap();
        let b = std::fs::read(d2.path().join(&f)).unwrap();
        assert_eq!(a, b, "{f:?}");
    }
}

#[test]
fn missing_tensor_file_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let model = FctModel::new(small(16, DeepSupervision::Partial), 0).unwrap();
    checkpoint::save(&model, dir.path()).unwrap();
    let victim = "dec2.wide_focus.branch1.kernel";
    std::fs::remove_file(dir.path().join(format!("{victim}.fctt"))).unwrap();
    let err = checkpoint::load(dir.path()).unwrap_err().to_string();
    assert!(err.contains(victim), "{err}");
}

#[test]
fn param_count_matches_checkpoint_files() {
    let dir = tempfile::tempdir().unwrap();
    let model = FctModel::new(ModelConfig::desk(), 0).unwrap();
    checkpoint::save(&model, dir.path()).unwrap();
    let mut total = 0usize;
    for entry in std::fs::read_dir(dir.path()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("fctt") {
            continue;
        }
        // header: magic(4) version(1) rank(1) rank×u32, then f32 payload
        let bytes = std::fs::read(&path).unwrap();
        let rank = bytes[5] as usize;
        total += (bytes.len() - 6 - 4 * rank) / 4;
    }
    assert_eq!(total, profile(&model).param_count);
}

#[test]
fn manifest_config_rebuilds_the_same_profile() {
    let dir = tempfile::tempdir().unwrap();
    let model = FctModel::new(ModelConfig::desk(), 0).unwrap();
    checkpoint::save(&model, dir.path()).unwrap();
    let m = checkpoint::read_manifest(dir.path()).unwrap();
    let rebuilt = FctModel::new(m.model_config, 9).unwrap();
    assert_eq!(profile(&rebuilt), profile(&model));
}
