//! Losses, metrics, optimizer, schedule, augmentation and the training and
//! evaluation loops.

pub mod augment;
pub mod loss;
pub mod metrics;
pub mod optim;

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{collate, SegmentationSample};
use crate::error::{FctError, Result};
use crate::model::{DeepSupervision, FctModel};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub use augment::{augment, AugmentConfig};
pub use loss::combined_loss;
pub use metrics::{dice_coefficient, dice_from_labels, sensitivity_specificity, DiceScores};
pub use optim::{adam_step, lr_schedule, AdamState, ScheduleConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_lr: f64,
    pub seed: u64,
    /// When set, must agree with the model's deep-supervision mode.
    pub ds_mode: Option<DeepSupervision>,
    pub augment: AugmentConfig,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    /// Fill the report's `seconds` column with wall-clock time. Off by default
    /// so that identical runs produce identical reports.
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            warmup_epochs: 50,
            epochs: 250,
            batch_size: 4,
            plateau_factor: 0.5,
            plateau_patience: 10,
            min_lr: 1e-6,
            seed: 0,
            ds_mode: None,
            augment: AugmentConfig::default(),
            max_steps: None,
            record_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.min_lr < 0.0 {
            return Err(FctError::config("lr must be positive and min_lr nonnegative"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(FctError::config(format!(
                "plateau_factor {} must lie in (0, 1)",
                self.plateau_factor
            )));
        }
        if self.warmup_epochs > self.epochs {
            return Err(FctError::config(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(FctError::config("batch_size must be at least 1"));
        }
        self.augment.validate()
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            lr: self.lr,
            warmup_epochs: self.warmup_epochs,
            plateau_factor: self.plateau_factor,
            plateau_patience: self.plateau_patience,
            min_lr: self.min_lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    /// Foreground classes `1..K`.
    pub dice: Vec<f64>,
    pub mean_dice: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRow>,
    pub steps: usize,
    pub best_epoch: Option<usize>,
    /// Mean train loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

impl TrainReport {
    pub fn to_csv(&self) -> Result<String> {
        let k = self.epochs.first().map_or(0, |r| r.dice.len());
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = ["epoch", "train_loss", "val_loss", "lr"].map(String::from).to_vec();
        header.extend((1..=k).map(|c| format!("dice_c{c}")));
        header.extend(["mean_dice".to_string(), "seconds".to_string()]);
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.epochs {
            let mut rec = vec![
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.val_loss.to_string(),
                r.lr.to_string(),
            ];
            rec.extend(r.dice.iter().map(|d| d.to_string()));
            rec.extend([r.mean_dice.to_string(), r.seconds.to_string()]);
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| FctError::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)? + "\n")?;
        std::fs::write(dir.join("report.csv"), self.to_csv()?)?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> FctError {
    FctError::invalid(format!("csv: {e}"))
}

/// Per-sample RNG stream, independent of batch composition and ordering.
fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a11c);
    r.set_stream(((epoch as u64) << 32) | index as u64);
    r
}

fn batch_dims(samples: &[&SegmentationSample]) -> [usize; 3] {
    [samples.len(), samples[0].height(), samples[0].width()]
}

/// Loss and gradients (registry order) for one batch.
pub fn loss_and_grads(model: &FctModel, batch: &[&SegmentationSample]) -> Result<(f64, Vec<Tensor<f32>>)> {
    let (x, mask) = collate(batch)?;
    let mut tape = Tape::<f32>::new();
    let params = model.registry.bind(&mut tape, true);
    let xv = tape.constant(x);
    let out = model.forward(&mut tape, &params, xv, false)?;
    let loss = combined_loss(&mut tape, &out.outputs, &mask, batch_dims(batch))?;
    let value = tape.value(loss).item()? as f64;
    let grads = tape.backward(loss)?;
    let g = params
        .iter()
        .zip(model.registry.iter())
        .map(|(&v, (_, _, t))| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    Ok((value, g))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub loss: f64,
    /// Per-image dice averaged over the set, every class.
    pub per_class_dice: Vec<f64>,
    pub mean_dice: f64,
    /// Only for two-class tasks.
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub images: usize,
}

/// Final-head argmax labels for a batch, `N·H·W` values.
pub fn predict_labels(model: &FctModel, images: &Tensor<f32>) -> Result<Vec<u16>> {
    let out = model.predict(images)?;
    let (_, logits) = out
        .iter()
        .find(|(d, _)| *d == 1)
        .ok_or_else(|| FctError::invalid("model has no full-resolution head"))?;
    Ok(metrics::argmax_labels(logits))
}

/// Loss and per-image dice over `samples`, no augmentation.
pub fn evaluate(model: &FctModel, samples: &[SegmentationSample], batch_size: usize) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(FctError::invalid("cannot evaluate an empty set"));
    }
    let k = model.cfg.num_classes;
    let mut loss_sum = 0.0;
    let mut dice_sum = vec![0.0; k];
    let (mut tpr_sum, mut tnr_sum) = (0.0, 0.0);
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&SegmentationSample> = chunk.iter().collect();
        let (x, mask) = collate(&refs)?;
        let mut tape = Tape::<f32>::new();
        let params = model.registry.bind(&mut tape, false);
        let xv = tape.constant(x);
        let out = model.forward(&mut tape, &params, xv, false)?;
        let l = combined_loss(&mut tape, &out.outputs, &mask, batch_dims(&refs))?;
        loss_sum += tape.value(l).item()? as f64 * chunk.len() as f64;
        let head = out
            .outputs
            .iter()
            .find(|o| o.divisor == 1)
            .ok_or_else(|| FctError::invalid("model has no full-resolution head"))?;
        let pred = metrics::argmax_labels(tape.value(head.logits));
        let px = chunk[0].mask.len();
        for (i, s) in chunk.iter().enumerate() {
            let p = &pred[i * px..(i + 1) * px];
            let d = dice_from_labels(p, &s.mask, k)?;
            dice_sum.iter_mut().zip(&d.per_class).for_each(|(a, b)| *a += b);
            if k == 2 {
                let pb: Vec<bool> = p.iter().map(|&v| v == 1).collect();
                let tb: Vec<bool> = s.mask.iter().map(|&v| v == 1).collect();
                let (tpr, tnr) = sensitivity_specificity(&pb, &tb);
                tpr_sum += tpr;
                tnr_sum += tnr;
            }
        }
    }
    let n = samples.len() as f64;
    let per_class_dice: Vec<f64> = dice_sum.iter().map(|d| d / n).collect();
    Ok(EvalReport {
        loss: loss_sum / n,
        mean_dice: metrics::foreground_mean(&per_class_dice),
        per_class_dice,
        sensitivity: (k == 2).then_some(tpr_sum / n),
        specificity: (k == 2).then_some(tnr_sum / n),
        images: samples.len(),
    })
}

/// Seeded mini-batch training with per-epoch validation. When `out_dir` is
/// given, the best-validation-loss checkpoint is kept in `out_dir/best` and
/// the report is written there as JSON and CSV.
pub fn train(
    model: &mut FctModel,
    train_set: &[SegmentationSample],
    val_set: &[SegmentationSample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if let Some(ds) = cfg.ds_mode {
        if ds != model.cfg.deep_supervision {
            return Err(FctError::config(format!(
                "train ds_mode {ds:?} disagrees with the model's {:?}",
                model.cfg.deep_supervision
            )));
        }
    }
    if train_set.is_empty() || val_set.is_empty() {
        return Err(FctError::invalid("training needs non-empty train and val sets"));
    }
    let k = model.cfg.num_classes;
    for s in train_set.iter().chain(val_set) {
        if s.max_label() as usize >= k {
            return Err(FctError::invalid(format!(
                "mask label {} is not below num_classes {k}",
                s.max_label()
            )));
        }
    }
    let schedule = cfg.schedule();
    let mut state = AdamState::new(&model.registry);
    let mut report = TrainReport::default();
    let mut val_history = Vec::with_capacity(cfg.epochs);
    let mut best = f64::INFINITY;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    'epochs: for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = lr_schedule(epoch, &val_history, &schedule);
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut batches) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| report.steps >= m) {
                break;
            }
            let augmented: Vec<SegmentationSample> = chunk
                .iter()
                .map(|&i| augment(&train_set[i], &cfg.augment, &mut sample_rng(cfg.seed, epoch, i)))
                .collect();
            let refs: Vec<&SegmentationSample> = augmented.iter().collect();
            let (loss, grads) = loss_and_grads(model, &refs).map_err(|e| match e {
                FctError::NonFinite(msg) => FctError::NonFinite(format!("at step {}: {msg}", report.steps)),
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(FctError::NonFinite(format!("loss {loss} at step {}", report.steps)));
            }
            adam_step(&mut model.registry, &grads, &mut state, lr)?;
            report.steps += 1;
            report.step_losses.push(loss);
            loss_sum += loss;
            batches += 1;
        }
        if batches == 0 {
            break 'epochs;
        }
        let ev = evaluate(model, val_set, cfg.batch_size)?;
        val_history.push(ev.loss);
        if ev.loss < best {
            best = ev.loss;
            report.best_epoch = Some(epoch);
            if let Some(dir) = out_dir {
                checkpoint::save(model, dir.join("best"))?;
            }
        }
        report.epochs.push(EpochRow {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_loss: ev.loss,
            lr,
            dice: ev.per_class_dice[1..].to_vec(),
            mean_dice: ev.mean_dice,
            seconds: if cfg.record_time { started.elapsed().as_secs_f64() } else { 0.0 },
        });
        if let Some(dir) = out_dir {
            report.write(dir)?;
        }
    }
    Ok(report)
}
