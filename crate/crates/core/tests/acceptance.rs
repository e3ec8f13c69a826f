//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the criteria execute one after another
//! on a quiet machine (several are timed). Pass criterion numbers as
//! arguments to run a subset: `cargo test --test acceptance -- 1 8 10`.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use fct::checkpoint;
use fct::cli::run_captured;
use fct::data::{synth_dataset, SegmentationSample, Split};
use fct::gradcheck::{grad_check_many, weighted_sum, GradCheckOptions, DEFAULT_TOLERANCE};
use fct::model::{DeepSupervision, FctModel, ModelConfig, ScaleOutput};
use fct::nn::build_with;
use fct::oracle::{jittered_params, random64, run_suite, Scale};
use fct::params::ParamRegistry;
use fct::profile::{profile, REFERENCE_GFLOPS, REFERENCE_PARAMS};
use fct::train::metrics::argmax_labels;
use fct::train::optim::ScheduleConfig;
use fct::train::{
    adam_step, combined_loss, dice_from_labels, evaluate, loss_and_grads, lr_schedule, train, AdamState,
    AugmentConfig, TrainConfig,
};
use fct::wide_focus::{WideFocus, WideFocusConfig};
use fct::{fctt, Tape, Tensor};

/// Attention key/value strides used for the desk-scale training runs; the
/// two finest stages on each side attend to a subsampled key grid.
const DESK_KV_STRIDES: [usize; 9] = [2, 1, 1, 1, 1, 1, 1, 2, 4];

/// Strides that keep the 224×224 score matrices within a few hundred MB.
const WIDE_KV_STRIDES: [usize; 9] = [4, 2, 1, 1, 1, 1, 2, 4, 8];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn desk_config(pyramid: bool) -> ModelConfig {
    ModelConfig {
        pyramid_inputs: pyramid,
        kv_strides: DESK_KV_STRIDES.to_vec(),
        ..ModelConfig::desk()
    }
}

// 1 -----------------------------------------------------------------------

fn gradient_oracle() -> fct::Result<Outcome> {
    let started = Instant::now();
    let cases = run_suite(0, Scale::Small)?;
    let elapsed = started.elapsed();
    let worst = cases.iter().map(|c| c.max_error).fold(0.0, f64::max);
    let failed: Vec<&str> = cases.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    let ok = failed.is_empty() && worst < DEFAULT_TOLERANCE && elapsed < Duration::from_secs(120);
    Ok(outcome(
        ok,
        format!(
            "{} cases, worst rel err {worst:.2e} (< 1e-4), failed {failed:?}, {:.1}s (< 120s)",
            cases.len(),
            elapsed.as_secs_f64()
        ),
    ))
}

// 2 -----------------------------------------------------------------------

fn scales_of(cfg: ModelConfig) -> fct::Result<Vec<usize>> {
    let [h, w] = cfg.input_size;
    let k = cfg.num_classes;
    let model = FctModel::new(cfg, 0)?;
    let x = Tensor::uniform(vec![1, h, w, 1], 0.0, 1.0, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1));
    let mut sides = Vec::new();
    for (divisor, logits) in model.predict(&x)? {
        let s = logits.shape();
        if s != [1, h / divisor, w / divisor, k] {
            return Err(fct::FctError::Shape(format!("head 1/{divisor} emitted {s:?}")));
        }
        sides.push(s[1]);
    }
    Ok(sides)
}

fn shape_contract() -> fct::Result<Outcome> {
    let started = Instant::now();
    let mut ok = true;
    let mut notes = Vec::new();
    for size in [224, 64] {
        for (mode, want) in [
            (DeepSupervision::Partial, vec![1, 2, 4]),
            (DeepSupervision::Full, vec![1, 2, 4, 8]),
            (DeepSupervision::Off, vec![1]),
        ] {
            let mut cfg = ModelConfig {
                input_size: [size, size],
                deep_supervision: mode,
                ..ModelConfig::default()
            };
            if size == 224 {
                cfg.kv_strides = WIDE_KV_STRIDES.to_vec();
            }
            let sides = scales_of(cfg)?;
            let expected: Vec<usize> = want.iter().map(|d| size / d).collect();
            ok &= sides == expected;
            notes.push(format!("{size}/{mode:?}={sides:?}"));
        }
    }
    Ok(outcome(ok, format!("{} ({:.1}s)", notes.join(" "), started.elapsed().as_secs_f64())))
}

// 3 -----------------------------------------------------------------------

fn trace_equations() -> fct::Result<Outcome> {
    let model = FctModel::new(ModelConfig::desk(), 0)?;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for seed in 0..3 {
        let x = random64(&[1, 64, 64, 1], 500 + seed).map(|v| 0.5 * (v + 1.0)).cast::<f32>();
        let traces = model.trace(&x)?;
        for ((name, tr), (_, layer)) in traces.iter().zip(model.stages()) {
            let mut tape = Tape::<f64>::new();
            let p = model.registry.bind(&mut tape, false);
            let z = tape.constant(tr.z_attn.clone());
            let wf = layer.wide_focus.forward(&mut tape, &p, z)?;
            let wf = tape.value(wf);
            for i in 0..tr.z_out.numel() {
                let attn = tr.attention_path.data()[i] + tr.v_residual.data()[i];
                worst = worst.max((tr.z_attn.data()[i] - attn).abs());
                worst = worst.max((tr.z_out.data()[i] - (wf.data()[i] + tr.z_attn.data()[i])).abs());
            }
            assert_eq!(tr.z_out.shape(), tr.z_attn.shape(), "{name}");
            checked += 1;
        }
    }
    Ok(outcome(
        worst < 1e-6 && checked == 27,
        format!("{checked} stage traces on 3 inputs, max deviation {worst:.2e} (< 1e-6)"),
    ))
}

// 4 -----------------------------------------------------------------------

fn fctt_element_count(path: &Path) -> usize {
    let bytes = std::fs::read(path).expect("readable tensor file");
    let rank = bytes[5] as usize;
    (bytes.len() - 6 - 4 * rank) / 4
}

fn profiler_bridge() -> fct::Result<Outcome> {
    let model = FctModel::new(ModelConfig::default(), 0)?;
    let report = profile(&model);
    let dir = tempfile::tempdir()?;
    checkpoint::save(&model, dir.path())?;
    let mut brute = 0;
    for entry in std::fs::read_dir(dir.path())? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "fctt") {
            brute += fctt_element_count(&path);
        }
    }
    let cmp = report.compare_reference();
    let verdict = |ok: bool| if ok { "agrees" } else { "disagrees" };
    println!(
        "    reference {:.1}M params / {:.2} GFLOPs; measured {:.2}M ({}) / {:.2} GFLOPs ({})",
        REFERENCE_PARAMS / 1e6,
        REFERENCE_GFLOPS,
        cmp.measured_params as f64 / 1e6,
        verdict(cmp.params_agree),
        cmp.measured_gflops,
        verdict(cmp.gflops_agree)
    );
    let in_band = (10_000_000..=40_000_000).contains(&report.param_count);
    Ok(outcome(
        brute == report.param_count && in_band,
        format!(
            "profile {} params == checkpoint files {brute}; within [10M, 40M]: {in_band}",
            report.param_count
        ),
    ))
}

// 5 -----------------------------------------------------------------------

fn wide_focus_ablations() -> fct::Result<Outcome> {
    let mut ok = true;
    let mut worst: f64 = 0.0;
    let grid = WideFocusConfig::ablation_grid();
    for (i, (name, cfg)) in grid.iter().enumerate() {
        let (wf, reg): (WideFocus, ParamRegistry) = build_with(i as u64, |init| WideFocus::new(init, 8, cfg.clone()))?;
        let mut tape = Tape::<f32>::new();
        let p = reg.bind(&mut tape, false);
        let x = tape.constant(random64(&[1, 16, 16, 8], 60 + i as u64).cast());
        let y = wf.forward(&mut tape, &p, x)?;
        let shape_ok = tape.shape(y) == [1, 16, 16, 8];

        let mut inputs = vec![random64(&[1, 8, 8, 8], 80 + i as u64)];
        inputs.extend(jittered_params(&reg, 90 + i as u64));
        let report = grad_check_many(
            |t, v| {
                let (_, out) = wf.forward_residual(t, &v[1..], v[0])?;
                weighted_sum(t, out, 7)
            },
            &inputs,
            &GradCheckOptions {
                max_probes: Some(12),
                ..Default::default()
            },
        )?;
        worst = worst.max(report.max_error());
        if !shape_ok || !report.passes(DEFAULT_TOLERANCE) {
            ok = false;
            println!("    {name}: shape ok {shape_ok}, rel err {:.2e}", report.max_error());
        }
    }
    Ok(outcome(
        ok && grid.len() == 10,
        format!("{} configurations, shape preserved, worst rel err {worst:.2e}", grid.len()),
    ))
}

// 6 -----------------------------------------------------------------------

fn train_dice(model: &FctModel, samples: &[SegmentationSample]) -> fct::Result<f64> {
    let refs: Vec<&SegmentationSample> = samples.iter().collect();
    let (x, mask) = fct::data::collate(&refs)?;
    let pred = argmax_labels(&model.predict(&x)?[0].1);
    let px = samples[0].mask.len();
    let mut total = 0.0;
    for (i, s) in samples.iter().enumerate() {
        total += dice_from_labels(&pred[i * px..(i + 1) * px], &s.mask, model.cfg.num_classes)?.mean;
    }
    debug_assert_eq!(mask.len(), px * samples.len());
    Ok(total / samples.len() as f64)
}

fn overfit() -> fct::Result<Outcome> {
    let started = Instant::now();
    let ds = synth_dataset(8, 64, 4, 1)?;
    let mut model = FctModel::new(desk_config(true), 0)?;
    let mut state = AdamState::new(&model.registry);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut order: Vec<usize> = (0..8).collect();
    let mut losses = Vec::new();
    let (mut reached, mut dice) = (None, 0.0);
    let mut step = 0;
    while step < 500 {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for chunk in order.chunks(4) {
            let batch: Vec<&SegmentationSample> = chunk.iter().map(|&i| &ds.samples[i]).collect();
            let (loss, grads) = loss_and_grads(&model, &batch)?;
            adam_step(&mut model.registry, &grads, &mut state, 1e-3)?;
            losses.push(loss);
            step += 1;
            if step % 25 == 0 && reached.is_none() {
                dice = train_dice(&model, &ds.samples)?;
                if dice >= 0.95 {
                    reached = Some(step);
                }
            }
        }
        if reached.is_some() && step >= 200 {
            break;
        }
    }
    let elapsed = started.elapsed();
    // non-overlapping 20-step windows over the first 200 steps
    let windows: Vec<f64> = losses[..200.min(losses.len())].chunks(20).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    let decreasing = windows.windows(2).all(|p| p[1] < p[0]);
    println!(
        "    20-step mean loss over the first 200 steps: {} (strictly decreasing: {decreasing})",
        windows.iter().map(|w| format!("{w:.3}")).collect::<Vec<_>>().join(" ")
    );
    let ok = reached.is_some() && elapsed < Duration::from_secs(600);
    Ok(outcome(
        ok,
        format!(
            "train mean dice {dice:.4} (>= 0.95) reached at step {reached:?} (<= 500), {:.0}s total (< 600s)",
            elapsed.as_secs_f64()
        ),
    ))
}

// 7 -----------------------------------------------------------------------

fn generalization_run(pyramid: bool) -> fct::Result<(f64, f64)> {
    let started = Instant::now();
    let ds = synth_dataset(250, 64, 4, 7)?;
    let split = Split::new(250, [0.8, 0.1, 0.1], 7)?;
    let mut model = FctModel::new(desk_config(pyramid), 0)?;
    let cfg = TrainConfig {
        epochs: 30,
        warmup_epochs: 2,
        batch_size: 4,
        augment: AugmentConfig::none(),
        ..Default::default()
    };
    train(&mut model, &ds.subset(&split.train), &ds.subset(&split.val), &cfg, None)?;
    let test = evaluate(&model, &ds.subset(&split.test), 8)?;
    Ok((test.mean_dice, started.elapsed().as_secs_f64()))
}

fn generalization() -> fct::Result<Outcome> {
    let (with, t1) = generalization_run(true)?;
    println!("    pyramid inputs on: held-out mean dice {with:.4} in {t1:.0}s");
    let (without, t2) = generalization_run(false)?;
    println!("    pyramid inputs off: held-out mean dice {without:.4} in {t2:.0}s");
    let ok = with >= 0.85 && without >= 0.80 && t1 < 2700.0 && t2 < 2700.0;
    Ok(outcome(
        ok,
        format!("200/25/25 split, 30 epochs: {with:.4} (>= 0.85), no pyramid {without:.4} (>= 0.80)"),
    ))
}

// 8 -----------------------------------------------------------------------

fn single_head_loss(logits: Tensor<f64>, mask: &[u16], dims: [usize; 3]) -> fct::Result<f64> {
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(logits);
    let out = combined_loss(&mut tape, &[ScaleOutput { divisor: 1, logits: l }], mask, dims)?;
    tape.value(out).item()
}

fn loss_closed_forms() -> fct::Result<Outcome> {
    let balanced: Vec<u16> = (0..64).map(|i| (i % 2) as u16).collect();
    let uniform = single_head_loss(Tensor::zeros(vec![1, 8, 8, 2]), &balanced, [1, 8, 8])?;
    let mask: Vec<u16> = (0..64).map(|i| (i % 3) as u16).collect();
    let saturated = single_head_loss(
        Tensor::from_fn(vec![1, 8, 8, 3], |f| if (f % 3) as u16 == mask[f / 3] { 40.0 } else { 0.0 }),
        &mask,
        [1, 8, 8],
    )?;
    Ok(outcome(
        (uniform - 0.5966).abs() <= 1e-3 && saturated < 1e-6,
        format!("uniform K=2 {uniform:.6} (0.5966 ± 1e-3), saturated {saturated:.2e} (< 1e-6)"),
    ))
}

// 9 -----------------------------------------------------------------------

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).expect("readable dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).expect("readable file")));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> fct::Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let p = |x: &Path| x.to_str().unwrap().to_string();
    let data = dir.path().join("data");
    let (code, _, err) = run_captured(["fct", "synth", "--out", &p(&data), "--n", "12", "--size", "32", "--classes", "3", "--seed", "5"]);
    if code != 0 {
        return Ok(outcome(false, format!("synth failed: {err}")));
    }
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"model": {"input_size": [32, 32], "num_classes": 3,
                      "stage_filters": [4, 8, 8, 8, 16, 8, 8, 8, 4],
                      "stage_heads": [1, 2, 2, 2, 2, 2, 2, 2, 1]},
            "train": {"epochs": 3, "warmup_epochs": 1, "batch_size": 4}}"#,
    )?;
    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let (code, _, err) = run_captured(["fct", "train", "--config", &p(&cfg), "--data", &p(&data), "--out", &p(&out), "--seed", "11"]);
        if code != 0 {
            return Ok(outcome(false, format!("train failed: {err}")));
        }
        trees.push(tree_bytes(&out));
    }
    let identical_runs = trees[0] == trees[1];

    let ds = synth_dataset(4, 32, 3, 9)?;
    let mut exact = true;
    for (i, s) in ds.samples.iter().enumerate() {
        let path = dir.path().join(format!("{i}.fctt"));
        fctt::write(&path, &s.image)?;
        let back = fctt::read(&path)?;
        exact &= back.shape() == s.image.shape()
            && back.data().iter().zip(s.image.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    Ok(outcome(
        identical_runs && exact,
        format!(
            "two seeded train runs byte-identical across {} files: {identical_runs}; .fctt round trips bit-exact: {exact}",
            trees[0].len()
        ),
    ))
}

// 10 ----------------------------------------------------------------------

fn optimizer_truths() -> fct::Result<Outcome> {
    let mut reg = ParamRegistry::new();
    reg.insert("p", Tensor::new(vec![1], vec![0.0f32])?)?;
    let mut state = AdamState::new(&reg);
    adam_step(&mut reg, &[Tensor::new(vec![1], vec![1.0f32])?], &mut state, 0.1)?;
    let p = reg.by_name("p").unwrap().data()[0] as f64;
    let adam_ok = (p + 0.1).abs() <= 1e-6;

    let cfg = ScheduleConfig {
        lr: 1e-3,
        warmup_epochs: 50,
        plateau_factor: 0.5,
        plateau_patience: 10,
        min_lr: 1e-6,
    };
    let start = lr_schedule(0, &[], &cfg);
    let end = lr_schedule(50, &[1.0; 50], &cfg);
    let warm_ok = start == 1e-3 / 100.0 && end == 1e-3;

    let flat = ScheduleConfig { warmup_epochs: 0, ..cfg };
    let before = lr_schedule(10, &[0.3; 10], &flat);
    let after = lr_schedule(11, &[0.3; 11], &flat);
    let plateau_ok = before == 1e-3 && after == 5e-4;
    Ok(outcome(
        adam_ok && warm_ok && plateau_ok,
        format!(
            "adam first step {p:.7} (-0.1 ± 1e-6); warmup {start:e} -> {end:e}; after 10/11 flat epochs {before:e} / {after:e}"
        ),
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> fct::Result<Outcome>); 10] = [
        ("gradient oracle", gradient_oracle),
        ("shape contract", shape_contract),
        ("layer equations on traces", trace_equations),
        ("profiler consistency and reference", profiler_bridge),
        ("wide-focus ablation space", wide_focus_ablations),
        ("overfit", overfit),
        ("generalization", generalization),
        ("loss closed forms", loss_closed_forms),
        ("determinism", determinism),
        ("scheduler and optimizer", optimizer_truths),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let (passed, detail) = match check() {
            Ok(o) => (o.passed, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failures += usize::from(!passed);
        println!("{} [{n:>2}] {name}: {detail}", if passed { "PASS" } else { "FAIL" });
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
