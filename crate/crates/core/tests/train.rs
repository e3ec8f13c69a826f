use fct::data::{synth_dataset, SegmentationSample};
use fct::gradcheck::{grad_check_many, GradCheckOptions, DEFAULT_TOLERANCE};
use fct::model::{DeepSupervision, FctModel, ModelConfig, ScaleOutput};
use fct::oracle::random64;
use fct::params::ParamRegistry;
use fct::train::augment::{apply_affine, Affine};
use fct::train::loss::{downsample_mask, one_hot};
use fct::train::metrics::argmax_labels;
use fct::train::optim::ScheduleConfig;
use fct::train::{
    adam_step, augment, combined_loss, dice_coefficient, dice_from_labels, lr_schedule, sensitivity_specificity, train,
    AdamState, AugmentConfig, TrainConfig,
};
use fct::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn loss_of(logits: Tensor<f64>, mask: &[u16], dims: [usize; 3]) -> f64 {
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(logits);
    let out = combined_loss(&mut tape, &[ScaleOutput { divisor: 1, logits: l }], mask, dims).unwrap();
    tape.value(out).item().unwrap()
}

fn one_hot32(labels: &[u16], k: usize) -> Tensor<f32> {
    one_hot(labels, [1, 1, labels.len()], k).unwrap()
}

// ----- metrics -------------------------------------------------------------

#[test]
fn dice_examples() {
    let target: Vec<u16> = vec![1, 1, 1, 1, 0, 0, 0, 0];
    let d = dice_coefficient(&one_hot32(&target, 2), &one_hot32(&target, 2)).unwrap();
    assert!(d.per_class.iter().all(|&v| (v - 1.0).abs() < 1e-12));

    let disjoint: Vec<u16> = vec![0, 0, 0, 0, 1, 1, 1, 1];
    let d = dice_coefficient(&one_hot32(&disjoint, 2), &one_hot32(&target, 2)).unwrap();
    assert!(d.per_class[1] < 1e-6);

    // prediction covers half of the target
    let half: Vec<u16> = vec![1, 1, 0, 0, 0, 0, 0, 0];
    let d = dice_coefficient(&one_hot32(&half, 2), &one_hot32(&target, 2)).unwrap();
    assert!((d.per_class[1] - 2.0 / 3.0).abs() < 1e-6);
    assert_eq!(d.mean, d.per_class[1]);
    assert!(dice_coefficient(&one_hot32(&half, 2), &one_hot32(&half, 3)).is_err());
}

#[test]
fn dice_is_symmetric_and_permutation_invariant() {
    let a: Vec<u16> = vec![0, 1, 2, 2, 1, 0, 2, 1, 1, 0];
    let b: Vec<u16> = vec![0, 2, 2, 1, 1, 0, 2, 0, 1, 1];
    let ab = dice_from_labels(&a, &b, 3).unwrap();
    assert_eq!(ab, dice_from_labels(&b, &a, 3).unwrap());
    let perm = [3usize, 9, 0, 5, 1, 8, 2, 7, 4, 6];
    let (pa, pb): (Vec<u16>, Vec<u16>) = perm.iter().map(|&i| (a[i], b[i])).unzip();
    assert_eq!(ab, dice_from_labels(&pa, &pb, 3).unwrap());
    let onehot = dice_coefficient(&one_hot32(&a, 3), &one_hot32(&b, 3)).unwrap();
    for (x, y) in ab.per_class.iter().zip(&onehot.per_class) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn sensitivity_specificity_examples() {
    let t = [true, true, true, true, false, false, false, false, false, false];
    assert_eq!(sensitivity_specificity(&t, &t), (1.0, 1.0));
    assert_eq!(sensitivity_specificity(&[true; 10], &t), (1.0, 0.0));
    // TP 3, FN 1, TN 5, FP 1
    let p = [true, true, true, false, false, false, false, false, false, true];
    let (tpr, tnr) = sensitivity_specificity(&p, &t);
    assert_eq!(tpr, 0.75);
    assert!((tnr - 5.0 / 6.0).abs() < 1e-15);
    assert_eq!(sensitivity_specificity(&[false; 3], &[false; 3]), (1.0, 1.0));
}

#[test]
fn argmax_picks_the_first_maximum() {
    let t = Tensor::new(vec![1, 1, 3, 3], vec![0.1, 0.5, 0.2, 1.0, 1.0, 0.0, -1.0, -2.0, -0.5]).unwrap();
    assert_eq!(argmax_labels(&t), vec![1, 0, 2]);
}

// ----- loss -----------------------------------------------------------------

#[test]
fn uniform_logits_balanced_binary_closed_form() {
    let mask: Vec<u16> = (0..16).map(|i| (i % 2) as u16).collect();
    let l = loss_of(Tensor::zeros(vec![1, 4, 4, 2]), &mask, [1, 4, 4]);
    let expected = 0.5 * 2f64.ln() + 0.5 * 0.5;
    assert!((l - 0.5966).abs() < 1e-3, "{l}");
    assert!((l - expected).abs() < 1e-6);
}

#[test]
fn saturated_correct_logits_give_near_zero_loss() {
    let mask: Vec<u16> = (0..32).map(|i| (i * 5 % 3) as u16).collect();
    let logits = Tensor::from_fn(vec![2, 4, 4, 3], |f| if (f % 3) as u16 == mask[f / 3] { 30.0 } else { 0.0 });
    let l = loss_of(logits, &mask, [2, 4, 4]);
    assert!((0.0..1e-6).contains(&l), "{l}");
}

#[test]
fn loss_is_nonnegative_on_random_logits() {
    for seed in 0..5 {
        let mask: Vec<u16> = (0..36).map(|i| ((i + seed) % 4) as u16).collect();
        let logits = random64(&[1, 6, 6, 4], seed as u64).map(|x| 5.0 * x);
        assert!(loss_of(logits, &mask, [1, 6, 6]) >= 0.0);
    }
}

#[test]
fn out_of_range_label_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(Tensor::zeros(vec![1, 2, 2, 2]));
    let heads = [ScaleOutput { divisor: 1, logits: l }];
    assert!(combined_loss(&mut tape, &heads, &[0, 1, 2, 0], [1, 2, 2]).is_err());
}

#[test]
fn heads_average_against_downsampled_targets() {
    let mask: Vec<u16> = (0..16).map(|i| (i % 4 >= 2) as u16).collect();
    assert_eq!(downsample_mask(&mask, [1, 4, 4], 2), vec![0, 1, 0, 1]);
    let full = random64(&[1, 4, 4, 2], 1);
    let half = random64(&[1, 2, 2, 2], 2);
    let a = loss_of(full.clone(), &mask, [1, 4, 4]);
    let b = loss_of(half.clone(), &downsample_mask(&mask, [1, 4, 4], 2), [1, 2, 2]);
    let mut tape = Tape::<f64>::new();
    let heads = [
        ScaleOutput { divisor: 1, logits: tape.constant(full) },
        ScaleOutput { divisor: 2, logits: tape.constant(half) },
    ];
    let l = combined_loss(&mut tape, &heads, &mask, [1, 4, 4]).unwrap();
    assert!((tape.value(l).item().unwrap() - (a + b) / 2.0).abs() < 1e-12);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mask: Vec<u16> = (0..16).map(|i| (i * 7 % 3) as u16).collect();
    let report = grad_check_many(
        |t, v| combined_loss(t, &[ScaleOutput { divisor: 1, logits: v[0] }], &mask, [1, 4, 4]),
        &[random64(&[1, 4, 4, 3], 5).map(|x| 2.0 * x)],
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passes(DEFAULT_TOLERANCE), "{}", report.max_error());
}

// ----- optimizer and schedule ----------------------------------------------

fn scalar_registry(v: f32) -> ParamRegistry {
    let mut reg = ParamRegistry::new();
    reg.insert("p", Tensor::new(vec![1], vec![v]).unwrap()).unwrap();
    reg
}

#[test]
fn adam_first_step_has_magnitude_lr() {
    let mut reg = scalar_registry(0.0);
    let mut st = AdamState::new(&reg);
    adam_step(&mut reg, &[Tensor::new(vec![1], vec![1.0]).unwrap()], &mut st, 0.1).unwrap();
    assert!((reg.by_name("p").unwrap().data()[0] as f64 + 0.1).abs() < 1e-6);
    assert_eq!(st.t, 1);
}

#[test]
fn adam_zero_gradient_leaves_parameters() {
    let mut reg = scalar_registry(0.7);
    let mut st = AdamState::new(&reg);
    for _ in 0..3 {
        adam_step(&mut reg, &[Tensor::zeros(vec![1])], &mut st, 0.1).unwrap();
    }
    assert_eq!(reg.by_name("p").unwrap().data()[0], 0.7);
    assert_eq!(st.t, 3);
}

#[test]
fn adam_rejects_mismatched_gradients() {
    let mut reg = scalar_registry(0.0);
    let mut st = AdamState::new(&reg);
    assert!(adam_step(&mut reg, &[Tensor::zeros(vec![2])], &mut st, 0.1).is_err());
    assert!(adam_step(&mut reg, &[], &mut st, 0.1).is_err());
}

#[test]
fn adam_is_deterministic() {
    let run = || {
        let mut reg = ParamRegistry::new();
        reg.insert("w", Tensor::uniform(vec![3, 4], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3))).unwrap();
        let mut st = AdamState::new(&reg);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let g = Tensor::uniform(vec![3, 4], -1.0, 1.0, &mut rng);
            adam_step(&mut reg, &[g], &mut st, 1e-2).unwrap();
        }
        reg.by_name("w").unwrap().clone()
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

fn schedule(warmup: usize) -> ScheduleConfig {
    ScheduleConfig {
        lr: 1e-3,
        warmup_epochs: warmup,
        plateau_factor: 0.5,
        plateau_patience: 10,
        min_lr: 1e-6,
    }
}

#[test]
fn warmup_endpoints() {
    let c = schedule(50);
    assert_eq!(lr_schedule(0, &[], &c), 1e-5);
    assert_eq!(lr_schedule(50, &[1.0; 50], &c), 1e-3);
    let mid = lr_schedule(25, &[1.0; 25], &c);
    assert!(mid > 1e-5 && mid < 1e-3);
}

#[test]
fn plateau_halves_once_after_patience_plus_one_flat_epochs() {
    let c = schedule(0);
    assert_eq!(lr_schedule(10, &[0.5; 10], &c), 1e-3);
    assert_eq!(lr_schedule(11, &[0.5; 11], &c), 5e-4);
    assert_eq!(lr_schedule(21, &[0.5; 21], &c), 2.5e-4);
    // flat history during warmup does not count
    let w = schedule(5);
    assert_eq!(lr_schedule(15, &[0.5; 15], &w), 1e-3);
}

#[test]
fn improving_loss_keeps_base_rate_and_floor_holds() {
    let c = schedule(0);
    let improving: Vec<f64> = (0..200).map(|i| 1.0 - i as f64 * 1e-3).collect();
    assert_eq!(lr_schedule(200, &improving, &c), 1e-3);
    assert_eq!(lr_schedule(500, &[1.0; 500], &c), 1e-6);
}

// ----- augmentation ---------------------------------------------------------

fn asymmetric_sample() -> SegmentationSample {
    let (h, w) = (8, 6);
    let mask: Vec<u16> = (0..h * w).map(|i| if i % w < 2 && i / w < 3 { 2 } else if i / w == 6 { 1 } else { 0 }).collect();
    let img = Tensor::from_fn(vec![h, w, 1], |i| i as f32 / (h * w) as f32);
    SegmentationSample::new(img, mask).unwrap()
}

#[test]
fn zero_ranges_leave_the_sample_unchanged() {
    let s = asymmetric_sample();
    let out = augment(&s, &AugmentConfig::none(), &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(out, s);
    assert_eq!(apply_affine(&s, &Affine::identity()), s);
}

#[test]
fn half_turn_flips_both_axes() {
    let s = asymmetric_sample();
    let (h, w) = (s.height(), s.width());
    let out = apply_affine(&s, &Affine::compose(180.0, 1.0, 0.0, [0.0, 0.0], [false, false]));
    for y in 0..h {
        for x in 0..w {
            assert_eq!(out.mask[y * w + x], s.mask[(h - 1 - y) * w + (w - 1 - x)]);
            let a = out.image.at(&[y, x, 0]);
            let b = s.image.at(&[h - 1 - y, w - 1 - x, 0]);
            assert!((a - b).abs() < 1e-5);
        }
    }
}

#[test]
fn augmentation_never_invents_classes_and_keeps_alignment() {
    let s = asymmetric_sample();
    let cfg = AugmentConfig::default();
    for seed in 0..20 {
        let out = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        assert!(out.mask.iter().all(|&m| m <= 2));
        // the same transform applied to a mask-valued image tracks the mask
        let as_image = SegmentationSample::new(
            Tensor::new(vec![8, 6, 1], s.mask.iter().map(|&m| m as f32).collect()).unwrap(),
            s.mask.clone(),
        )
        .unwrap();
        let twin = augment(&as_image, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        assert_eq!(twin.mask, out.mask);
        assert_eq!(dice_from_labels(&twin.mask, &out.mask, 3).unwrap().mean, 1.0);
    }
    assert!(AugmentConfig { zoom_max: -0.1, ..cfg }.validate().is_err());
}

// ----- training loop ------------------------------------------------------

fn tiny_model(seed: u64) -> FctModel {
    let cfg = ModelConfig {
        input_size: [16, 16],
        num_classes: 3,
        stage_filters: vec![4, 4, 8, 8, 8, 8, 8, 4, 4],
        stage_heads: vec![1, 1, 2, 2, 2, 2, 2, 1, 1],
        ..ModelConfig::desk()
    };
    FctModel::new(cfg, seed).unwrap()
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        warmup_epochs: 1,
        batch_size: 2,
        ..Default::default()
    }
}

#[test]
fn seeded_runs_give_identical_reports() {
    let ds = synth_dataset(6, 16, 3, 1).unwrap();
    let run = || {
        let mut m = tiny_model(0);
        let r = train(&mut m, &ds.samples[..4], &ds.samples[4..], &tiny_config(), None).unwrap();
        (r, m.registry)
    };
    let (r1, p1) = run();
    let (r2, p2) = run();
    assert_eq!(r1, r2);
    assert_eq!(r1.to_csv().unwrap(), r2.to_csv().unwrap());
    assert_eq!(r1.epochs.len(), 2);
    assert_eq!(r1.steps, 4);
    for ((_, _, a), (_, _, b)) in p1.iter().zip(p2.iter()) {
        assert_eq!(a, b);
    }
    let header = r1.to_csv().unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "epoch,train_loss,val_loss,lr,dice_c1,dice_c2,mean_dice,seconds");
}

#[test]
fn report_files_and_best_checkpoint_are_written() {
    let ds = synth_dataset(4, 16, 3, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut m = tiny_model(1);
    let r = train(&mut m, &ds.samples[..2], &ds.samples[2..], &tiny_config(), Some(dir.path())).unwrap();
    assert!(r.best_epoch.is_some());
    for f in ["report.json", "report.csv", "best/manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn training_rejects_bad_inputs() {
    let ds = synth_dataset(4, 16, 4, 3).unwrap();
    let mut m = tiny_model(0);
    // labels up to 3 against a 3-class model
    assert!(train(&mut m, &ds.samples[..2], &ds.samples[2..], &tiny_config(), None).is_err());
    let ds = synth_dataset(4, 16, 3, 3).unwrap();
    assert!(train(&mut m, &ds.samples[..2], &[], &tiny_config(), None).is_err());
    let cfg = TrainConfig { ds_mode: Some(DeepSupervision::Full), ..tiny_config() };
    assert!(train(&mut m, &ds.samples[..2], &ds.samples[2..], &cfg, None).is_err());
    let cfg = TrainConfig { plateau_factor: 1.5, ..tiny_config() };
    assert!(cfg.validate().is_err());
}

#[test]
fn step_zero_loss_is_near_the_uniform_predictor() {
    let ds = synth_dataset(4, 64, 4, 5).unwrap();
    let model = FctModel::new(ModelConfig::desk(), 0).unwrap();
    let refs: Vec<&SegmentationSample> = ds.samples.iter().collect();
    let (loss, _) = fct::train::loss_and_grads(&model, &refs).unwrap();
    // uniform softmax over the same targets, one head per scale
    let mut tape = Tape::<f64>::new();
    let heads: Vec<ScaleOutput> = [1usize, 2, 4]
        .iter()
        .map(|&d| ScaleOutput { divisor: d, logits: tape.constant(Tensor::zeros(vec![4, 64 / d, 64 / d, 4])) })
        .collect();
    let mask: Vec<u16> = ds.samples.iter().flat_map(|s| s.mask.clone()).collect();
    let l = combined_loss(&mut tape, &heads, &mask, [4, 64, 64]).unwrap();
    let uniform = tape.value(l).item().unwrap();
    assert!((loss - uniform).abs() / uniform < 0.2, "step-0 loss {loss}, uniform {uniform}");
}

proptest::proptest! {
    #[test]
    fn label_dice_is_symmetric_and_bounded(
        pairs in proptest::collection::vec((0u16..4, 0u16..4), 1..200),
    ) {
        let (a, b): (Vec<u16>, Vec<u16>) = pairs.into_iter().unzip();
        let ab = dice_from_labels(&a, &b, 4).unwrap();
        let ba = dice_from_labels(&b, &a, 4).unwrap();
        proptest::prop_assert_eq!(&ab, &ba);
        proptest::prop_assert!(ab.per_class.iter().all(|d| (0.0..=1.0 + 1e-12).contains(d)));
        let same = dice_from_labels(&a, &a, 4).unwrap();
        proptest::prop_assert!(same.per_class.iter().all(|d| (d - 1.0).abs() < 1e-12));
    }
}
