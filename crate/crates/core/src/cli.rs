//! The `fct` command line: `synth`, `train`, `infer`, `eval`, `profile`,
//! `gradcheck`.
//!
//! Exit codes: 0 success, 1 usage error (bad flags, unknown config keys),
//! 2 validation or data error, 3 numerical failure. Errors go to stderr; with
//! `--json` both results and errors are JSON objects carrying `"schema": 1`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use image::{ImageBuffer, Rgb};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint;
use crate::data::{self, FileFormat, SplitName, DEFAULT_SPLIT};
use crate::error::FctError;
use crate::model::{FctModel, ModelConfig};
use crate::oracle::{self, Scale};
use crate::profile::{profile, REFERENCE_PARAMS_ABLATION};
use crate::train::{self, TrainConfig};

pub const JSON_SCHEMA: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "fct", version, about = "Fully Convolutional Transformer for 2-D segmentation")]
pub struct Cli {
    /// Emit results and errors as JSON.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic shapes dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 250)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "fctt")]
        format: FileFormat,
    },
    /// Train a model; writes checkpoints and report.{json,csv} to OUT.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Segment one image.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "png")]
        format: FileFormat,
        /// Also write a color overlay of the prediction (PNG).
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Dice (and sensitivity/specificity for binary tasks) on a split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitName,
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
    },
    /// Parameter count, FLOPs and the per-stage shape table.
    Profile {
        /// Config file with a `model` section; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every primitive and block.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "tiny")]
        scale: Scale,
    },
}

/// Top-level config file: `{"model": {...}, "train": {...}}`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

/// A command failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: 1,
            kind: "usage",
            message: message.into(),
        }
    }

    fn numerical(message: impl Into<String>) -> Self {
        CliError {
            code: 3,
            kind: "numerical",
            message: message.into(),
        }
    }
}

impl From<FctError> for CliError {
    fn from(e: FctError) -> Self {
        let (code, kind) = match &e {
            FctError::NonFinite(_) => (3, "numerical"),
            _ => (2, "validation"),
        };
        CliError {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

pub fn read_config(path: &Path) -> CliResult<ConfigFile> {
    let text = fs::read_to_string(path).map_err(|e| CliError::from(FctError::data(path, e.to_string())))?;
    // unknown or mistyped keys are a usage problem, not a data problem
    let cfg: ConfigFile =
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

/// What a command produced: human text for stdout and the JSON result.
struct Output {
    text: String,
    json: Value,
}

fn synth(out: &Path, n: usize, size: usize, classes: usize, seed: u64, format: FileFormat) -> CliResult<Output> {
    let ds = data::synth_dataset(n, size, classes, seed)?;
    data::save_dataset(&ds, out, format, DEFAULT_SPLIT, seed)?;
    Ok(Output {
        text: format!("wrote {n} samples ({size}×{size}, {classes} classes) to {}\n", out.display()),
        json: json!({"out": out, "samples": n, "size": size, "classes": classes, "format": format}),
    })
}

fn train_cmd(config: &Path, data_dir: &Path, out: &Path, seed: Option<u64>) -> CliResult<Output> {
    let mut cfg = read_config(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let (manifest, ds) = data::load_dataset(data_dir, Some(cfg.model.input_size))?;
    if ds.num_classes != cfg.model.num_classes {
        return Err(CliError::from(FctError::data(
            data_dir.join(data::DATASET_JSON),
            format!(
                "dataset has {} classes, model config has {}",
                ds.num_classes, cfg.model.num_classes
            ),
        )));
    }
    let train_set = ds.subset(&manifest.split.train);
    let val_set = ds.subset(&manifest.split.val);
    let mut model = FctModel::new(cfg.model.clone(), cfg.train.seed)?;
    fs::create_dir_all(out).map_err(FctError::from)?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg).map_err(FctError::from)? + "\n")
        .map_err(FctError::from)?;
    let report = train::train(&mut model, &train_set, &val_set, &cfg.train, Some(out))?;
    checkpoint::save(&model, out.join("last"))?;
    report.write(out)?;
    let last = report.epochs.last();
    Ok(Output {
        text: format!(
            "trained {} epochs ({} steps); best epoch {:?}; final val mean dice {:.4}\n",
            report.epochs.len(),
            report.steps,
            report.best_epoch,
            last.map_or(f64::NAN, |r| r.mean_dice)
        ),
        json: json!({
            "out": out,
            "epochs": report.epochs.len(),
            "steps": report.steps,
            "best_epoch": report.best_epoch,
            "final": last,
        }),
    })
}

/// Overlay colors for foreground classes; background keeps the image gray.
const PALETTE: [[u8; 3]; 6] = [[230, 25, 75], [60, 180, 75], [0, 130, 200], [245, 130, 48], [145, 30, 180], [70, 240, 240]];

fn infer(model_dir: &Path, input: &Path, output: &Path, format: FileFormat, overlay: Option<&Path>) -> CliResult<Output> {
    let model = checkpoint::load(model_dir)?;
    let image = data::read_image(input)?;
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if c != model.cfg.in_channels {
        return Err(CliError::from(FctError::data(
            input,
            format!("image has {c} channels, model expects {}", model.cfg.in_channels),
        )));
    }
    let [mh, mw] = model.cfg.input_size;
    let resized = data::resize_image(&image, [mh, mw]);
    let batch = resized.reshape(vec![1, mh, mw, c])?;
    let labels = train::predict_labels(&model, &batch)?;
    let labels = data::resize_mask(&labels, [mh, mw], [h, w]);
    data::write_mask(output, &labels, h, w, format)?;
    if let Some(path) = overlay {
        let px = image.data();
        let buf = ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            let g = (px[i * c..(i + 1) * c].iter().sum::<f32>() / c as f32 * 255.0).clamp(0.0, 255.0) as u8;
            match labels[i] {
                0 => Rgb([g, g, g]),
                l => {
                    let col = PALETTE[(l as usize - 1) % PALETTE.len()];
                    Rgb(col.map(|v| ((v as u16 + g as u16) / 2) as u8))
                }
            }
        });
        buf.save(path).map_err(FctError::from)?;
    }
    let mut counts = vec![0usize; model.cfg.num_classes];
    labels.iter().for_each(|&l| counts[l as usize] += 1);
    Ok(Output {
        text: format!("wrote {h}×{w} mask to {}; pixels per class {counts:?}\n", output.display()),
        json: json!({"output": output, "height": h, "width": w, "class_pixels": counts}),
    })
}

fn eval_cmd(model_dir: &Path, data_dir: &Path, split: SplitName, batch_size: usize) -> CliResult<Output> {
    let model = checkpoint::load(model_dir)?;
    let (manifest, ds) = data::load_dataset(data_dir, Some(model.cfg.input_size))?;
    let idx = manifest.split.get(split);
    if idx.is_empty() {
        return Err(CliError::from(FctError::data(data_dir, format!("split {split:?} is empty"))));
    }
    let report = train::evaluate(&model, &ds.subset(idx), batch_size)?;
    let json = serde_json::to_value(&report).map_err(FctError::from)?;
    Ok(Output {
        text: serde_json::to_string_pretty(&json).map_err(FctError::from)? + "\n",
        json,
    })
}

fn profile_cmd(config: Option<&Path>) -> CliResult<Output> {
    let cfg = match config {
        Some(p) => read_config(p)?.model,
        None => ModelConfig::default(),
    };
    let model = FctModel::new(cfg, 0)?;
    let report = profile(&model);
    let cmp = report.compare_reference();
    let verdict = |ok: bool| if ok { "agrees" } else { "disagrees" };
    let mut text = report.table();
    text.push_str(&format!(
        "reference: {:.1}M params, {:.2} GFLOPs; measured {:.2}M ({}), {:.3} GFLOPs ({}); \
         the same reference also quotes {:.1}M params for this configuration\n",
        cmp.reference_params / 1e6,
        cmp.reference_gflops,
        cmp.measured_params as f64 / 1e6,
        verdict(cmp.params_agree),
        cmp.measured_gflops,
        verdict(cmp.gflops_agree),
        REFERENCE_PARAMS_ABLATION / 1e6,
    ));
    text.push_str(&format!("flop convention: {}\n", report.convention));
    Ok(Output {
        text,
        json: json!({"profile": report, "reference": cmp}),
    })
}

fn gradcheck_cmd(seed: u64, scale: Scale) -> CliResult<Output> {
    let cases = oracle::run_suite(seed, scale)?;
    let mut text = String::new();
    for c in &cases {
        text.push_str(&format!(
            "{} {:<32} max rel err {:.2e} ({} probes)\n",
            if c.passed { "pass" } else { "FAIL" },
            c.name,
            c.max_error,
            c.probes
        ));
    }
    let failed: Vec<&str> = cases.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(CliError::numerical(format!(
            "gradient check failed: {}\n{text}",
            failed.join(", ")
        )));
    }
    Ok(Output {
        text,
        json: json!({"cases": cases}),
    })
}

fn dispatch(cmd: &Command) -> CliResult<(&'static str, Output)> {
    Ok(match cmd {
        Command::Synth {
            out,
            n,
            size,
            classes,
            seed,
            format,
        } => ("synth", synth(out, *n, *size, *classes, *seed, *format)?),
        Command::Train { config, data, out, seed } => ("train", train_cmd(config, data, out, *seed)?),
        Command::Infer {
            model,
            input,
            output,
            format,
            overlay,
        } => ("infer", infer(model, input, output, *format, overlay.as_deref())?),
        Command::Eval {
            model,
            data,
            split,
            batch_size,
        } => ("eval", eval_cmd(model, data, *split, *batch_size)?),
        Command::Profile { config } => ("profile", profile_cmd(config.as_deref())?),
        Command::Gradcheck { seed, scale } => ("gradcheck", gradcheck_cmd(*seed, *scale)?),
    })
}

/// Parses `args` (including the program name), runs the command, and returns
/// the process exit code.
pub fn run<I, S>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let args: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let json_flag = args.iter().any(|a| a == "--json");
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return 0;
            }
            report_error(stderr, json_flag, &CliError::usage(e.to_string().trim_end()));
            return 1;
        }
    };
    match dispatch(&cli.command) {
        Ok((name, out)) => {
            if cli.json {
                let v = json!({"schema": JSON_SCHEMA, "command": name, "result": out.json});
                let _ = writeln!(stdout, "{v}");
            } else {
                let _ = write!(stdout, "{}", out.text);
            }
            0
        }
        Err(e) => {
            report_error(stderr, cli.json, &e);
            e.code
        }
    }
}

fn report_error(stderr: &mut dyn Write, json: bool, e: &CliError) {
    if json {
        let v = json!({
            "schema": JSON_SCHEMA,
            "error": {"kind": e.kind, "code": e.code, "message": e.message},
        });
        let _ = writeln!(stderr, "{v}");
    } else {
        let _ = writeln!(stderr, "error: {}", e.message);
    }
}

/// Convenience for tests: the exit code plus captured stdout and stderr.
pub fn run_captured<I, S>(args: I) -> (i32, String, String)
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run(args, &mut out, &mut err);
    (
        code,
        String::from_utf8_lossy(&out).into_owned(),
        String::from_utf8_lossy(&err).into_owned(),
    )
}
