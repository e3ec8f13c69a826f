//! Train a small model on generated shapes, evaluate it on held-out images,
//! then round-trip it through a checkpoint and label one image.
//!
//! `cargo run --release --example train_synthetic -- [epochs]`

use fct::checkpoint;
use fct::data::{synth_dataset, Split};
use fct::model::{FctModel, ModelConfig};
use fct::train::{evaluate, predict_labels, train, AugmentConfig, TrainConfig};

fn main() -> fct::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(3);

    let ds = synth_dataset(60, 32, 3, 0)?;
    let split = Split::new(ds.len(), [0.7, 0.1, 0.2], 0)?;
    let cfg = ModelConfig {
        input_size: [32, 32],
        num_classes: 3,
        stage_filters: vec![4, 8, 8, 16, 16, 16, 8, 8, 4],
        stage_heads: vec![1, 2, 2, 2, 2, 2, 2, 2, 1],
        ..ModelConfig::desk()
    };
    let mut model = FctModel::new(cfg, 0)?;
    let tc = TrainConfig {
        epochs,
        warmup_epochs: 1,
        batch_size: 4,
        augment: AugmentConfig::none(),
        ..Default::default()
    };

    let out = tempfile_dir()?;
    let report = train(&mut model, &ds.subset(&split.train), &ds.subset(&split.val), &tc, Some(&out))?;
    for row in &report.epochs {
        println!(
            "epoch {:>2} train {:.4} val {:.4} lr {:.2e} mean dice {:.3}",
            row.epoch, row.train_loss, row.val_loss, row.lr, row.mean_dice
        );
    }

    let test = ds.subset(&split.test);
    let eval = evaluate(&model, &test, 4)?;
    println!("test: loss {:.4}, per-class dice {:.3?}", eval.loss, eval.per_class_dice);

    // `train` keeps the best-validation weights in `best/`; save the final ones too
    let last = out.join("last");
    checkpoint::save(&model, &last)?;
    let restored = checkpoint::load(&last)?;
    let (x, _) = fct::data::collate(&[&test[0]])?;
    assert_eq!(predict_labels(&model, &x)?, predict_labels(&restored, &x)?);
    println!("checkpoint in {} reproduces the trained model", last.display());
    Ok(())
}

fn tempfile_dir() -> fct::Result<std::path::PathBuf> {
    let dir = std::env::temp_dir().join(format!("fct-train-synthetic-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}
