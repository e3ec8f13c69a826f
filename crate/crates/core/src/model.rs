//! The full UNet-shaped network: four encoder FCT layers, a bottleneck, four
//! decoder FCT layers, pyramid image inputs and deep-supervision heads.
//!
//! Resolutions for input `H`: encoders emit `H/2 … H/16`, the bottleneck
//! stays at `H/16`, decoders climb back `H/8 … H`. Decoder `i` concatenates
//! the encoder feature at its own resolution; the last decoder takes the
//! first encoder's pre-pool stem feature.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::FctLayerTrace;
use crate::error::{FctError, Result};
use crate::layer::{FctLayer, FctLayerConfig, Variant};
use crate::nn::Conv2d;
use crate::params::{ParamInit, ParamRegistry};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};
use crate::wide_focus::WideFocusConfig;

pub const STAGES: usize = 9;
pub const STAGE_NAMES: [&str; STAGES] = ["enc1", "enc2", "enc3", "enc4", "bottleneck", "dec1", "dec2", "dec3", "dec4"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DeepSupervision {
    /// Heads on every decoder stage.
    Full,
    /// Heads on every decoder stage except the lowest-resolution one.
    #[default]
    Partial,
    /// Final full-resolution head only.
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_input_size")]
    pub input_size: [usize; 2],
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_filters")]
    pub stage_filters: Vec<usize>,
    #[serde(default = "default_heads")]
    pub stage_heads: Vec<usize>,
    #[serde(default)]
    pub wf: WideFocusConfig,
    #[serde(default = "default_true")]
    pub pyramid_inputs: bool,
    #[serde(default)]
    pub deep_supervision: DeepSupervision,
    #[serde(default = "default_kv_strides")]
    pub kv_strides: Vec<usize>,
}

fn default_input_size() -> [usize; 2] {
    [224, 224]
}
fn default_in_channels() -> usize {
    1
}
fn default_classes() -> usize {
    4
}
fn default_filters() -> Vec<usize> {
    vec![16, 32, 64, 128, 384, 128, 64, 32, 16]
}
fn default_heads() -> Vec<usize> {
    vec![2, 4, 8, 12, 16, 12, 8, 4, 2]
}
fn default_true() -> bool {
    true
}
fn default_kv_strides() -> Vec<usize> {
    vec![1; STAGES]
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: default_input_size(),
            in_channels: default_in_channels(),
            num_classes: default_classes(),
            stage_filters: default_filters(),
            stage_heads: default_heads(),
            wf: WideFocusConfig::default(),
            pyramid_inputs: true,
            deep_supervision: DeepSupervision::Partial,
            kv_strides: default_kv_strides(),
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration: 64×64 input, four classes, narrower stages.
    pub fn desk() -> Self {
        ModelConfig {
            input_size: [64, 64],
            num_classes: 4,
            stage_filters: vec![8, 16, 32, 64, 96, 64, 32, 16, 8],
            stage_heads: vec![2, 2, 4, 4, 8, 4, 4, 2, 2],
            ..Default::default()
        }
    }

    /// Attention grid side of each stage for input side `n`.
    pub fn stage_resolution(n: usize, stage: usize) -> usize {
        match stage {
            0..=3 => n >> (stage + 1),
            4 => n >> 4,
            _ => n >> (8 - stage),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.input_size;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(FctError::config(format!(
                "input_size {:?} must be positive multiples of 16",
                self.input_size
            )));
        }
        for (name, list) in [
            ("stage_filters", &self.stage_filters),
            ("stage_heads", &self.stage_heads),
            ("kv_strides", &self.kv_strides),
        ] {
            if list.len() != STAGES {
                return Err(FctError::config(format!(
                    "{name} must have {STAGES} entries, got {}",
                    list.len()
                )));
            }
            if list.contains(&0) {
                return Err(FctError::config(format!("{name} entries must be ≥ 1")));
            }
        }
        if self.in_channels == 0 || self.num_classes < 2 {
            return Err(FctError::config("need in_channels ≥ 1 and num_classes ≥ 2"));
        }
        for (i, &s) in self.kv_strides.iter().enumerate() {
            let (rh, rw) = (Self::stage_resolution(h, i), Self::stage_resolution(w, i));
            if rh % s != 0 || rw % s != 0 {
                return Err(FctError::config(format!(
                    "kv_strides[{i}] = {s} does not divide the {rh}×{rw} grid of {}",
                    STAGE_NAMES[i]
                )));
            }
        }
        self.wf.validate()
    }

    fn layer_config(&self, stage: usize, variant: Variant) -> FctLayerConfig {
        let mut cfg = FctLayerConfig::new(variant, self.stage_filters[stage], self.stage_heads[stage]);
        cfg.attention.kv_stride = self.kv_strides[stage];
        cfg.wf = self.wf.clone();
        cfg
    }

    /// Decoder stages (0-based within the decoder) that carry a head.
    pub fn head_stages(&self) -> Vec<usize> {
        match self.deep_supervision {
            DeepSupervision::Full => vec![3, 2, 1, 0],
            DeepSupervision::Partial => vec![3, 2, 1],
            DeepSupervision::Off => vec![3],
        }
    }
}

/// A 1×1 segmentation head on one decoder stage.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub decoder: usize,
    /// Output side is input side divided by this.
    pub divisor: usize,
    pub conv: Conv2d,
}

#[derive(Clone, Debug)]
pub struct FctModel {
    pub cfg: ModelConfig,
    pub registry: ParamRegistry,
    pub encoders: Vec<FctLayer>,
    pub bottleneck: FctLayer,
    pub decoders: Vec<FctLayer>,
    /// Image-pyramid convolutions feeding encoders 2–4.
    pub pyramid: Vec<Conv2d>,
    /// Ordered finest scale first.
    pub heads: Vec<Head>,
}

/// Logits from one head.
#[derive(Clone, Copy, Debug)]
pub struct ScaleOutput {
    pub divisor: usize,
    pub logits: Var,
}

pub struct ForwardOutput {
    pub outputs: Vec<ScaleOutput>,
    /// `(stage name, trace)` when tracing was requested.
    pub traces: Vec<(String, FctLayerTrace)>,
}

impl FctModel {
    /// Builds a model with freshly initialized weights.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut registry = ParamRegistry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = ParamInit::new(&mut registry, &mut rng);
        let f = &cfg.stage_filters;

        let mut encoders = Vec::with_capacity(4);
        let mut pyramid = Vec::new();
        for i in 0..4 {
            let mut in_ch = if i == 0 { cfg.in_channels } else { f[i - 1] };
            if cfg.pyramid_inputs && i > 0 {
                pyramid.push(Conv2d::same(
                    &mut init.scope("pyramid"),
                    &format!("scale{}", 1 << i),
                    cfg.in_channels,
                    f[i],
                    3,
                )?);
                in_ch += f[i];
            }
            encoders.push(FctLayer::new(
                &mut init.scope(STAGE_NAMES[i]),
                in_ch,
                cfg.layer_config(i, Variant::Encoder),
            )?);
        }
        let bottleneck = FctLayer::new(
            &mut init.scope(STAGE_NAMES[4]),
            f[3],
            cfg.layer_config(4, Variant::Bottleneck),
        )?;
        // skip channels for decoders 1..4: enc3 out, enc2 out, enc1 out, enc1 stem
        let skip_ch = [f[2], f[1], f[0], f[0]];
        let mut decoders = Vec::with_capacity(4);
        for d in 0..4 {
            let stage = 5 + d;
            decoders.push(FctLayer::new(
                &mut init.scope(STAGE_NAMES[stage]),
                f[stage - 1] + skip_ch[d],
                cfg.layer_config(stage, Variant::Decoder),
            )?);
        }
        let mut heads = Vec::new();
        for d in cfg.head_stages() {
            heads.push(Head {
                decoder: d,
                divisor: 8 >> d,
                conv: Conv2d::pointwise(
                    &mut init.scope("heads"),
                    STAGE_NAMES[5 + d],
                    f[5 + d],
                    cfg.num_classes,
                )?,
            });
        }
        Ok(FctModel {
            cfg,
            registry,
            encoders,
            bottleneck,
            decoders,
            pyramid,
            heads,
        })
    }

    /// Rebuilds the architecture for `cfg` and swaps in `registry`, which must
    /// match it name-for-name and shape-for-shape.
    pub fn with_registry(cfg: ModelConfig, registry: ParamRegistry) -> Result<Self> {
        let mut model = FctModel::new(cfg, 0)?;
        let mut problems = Vec::new();
        for (_, name, t) in model.registry.iter() {
            match registry.by_name(name) {
                None => problems.push(format!("missing `{name}`")),
                Some(r) if r.shape() != t.shape() => problems.push(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    r.shape(),
                    t.shape()
                )),
                Some(_) => {}
            }
        }
        for (_, name, _) in registry.iter() {
            if model.registry.id_of(name).is_none() {
                problems.push(format!("unexpected `{name}`"));
            }
        }
        if !problems.is_empty() {
            return Err(FctError::Checkpoint(problems.join("; ")));
        }
        let mut ordered = ParamRegistry::new();
        for (_, name, _) in model.registry.iter() {
            ordered.insert(name, registry.by_name(name).unwrap().clone())?;
        }
        model.registry = ordered;
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.registry.count()
    }

    /// Runs the network on `x` (`[N,H,W,C_in]`) with parameters bound as
    /// `params` (from [`ParamRegistry::bind`]).
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, params: &[Var], x: Var, trace: bool) -> Result<ForwardOutput> {
        let s = tape.shape(x).to_vec();
        let [h, w] = self.cfg.input_size;
        if s.len() != 4 || s[1] != h || s[2] != w || s[3] != self.cfg.in_channels {
            return Err(FctError::shape(format!(
                "model expects [N,{h},{w},{}], got {s:?}",
                self.cfg.in_channels
            )));
        }
        let mut traces = Vec::new();
        let mut keep = |name: &str, t: Option<FctLayerTrace>| {
            if let Some(t) = t {
                traces.push((name.to_string(), t));
            }
        };

        let mut enc_out = Vec::with_capacity(4);
        let mut enc1_stem = None;
        let mut h_var = x;
        for (i, enc) in self.encoders.iter().enumerate() {
            if self.cfg.pyramid_inputs && i > 0 {
                let pooled = tape.avg_pool2d(x, 1 << i)?;
                let p = self.pyramid[i - 1].forward(tape, params, pooled)?;
                h_var = tape.concat_channels(h_var, p)?;
            }
            let out = enc.forward(tape, params, h_var, None, trace)?;
            keep(STAGE_NAMES[i], out.trace);
            if i == 0 {
                enc1_stem = Some(out.stem);
            }
            enc_out.push(out.y);
            h_var = out.y;
        }
        let out = self.bottleneck.forward(tape, params, h_var, None, trace)?;
        keep(STAGE_NAMES[4], out.trace);
        h_var = out.y;

        let skips = [enc_out[2], enc_out[1], enc_out[0], enc1_stem.unwrap()];
        let mut dec_out = Vec::with_capacity(4);
        for (d, dec) in self.decoders.iter().enumerate() {
            let out = dec.forward(tape, params, h_var, Some(skips[d]), trace)?;
            keep(STAGE_NAMES[5 + d], out.trace);
            dec_out.push(out.y);
            h_var = out.y;
        }
        let mut outputs = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let logits = head.conv.forward(tape, params, dec_out[head.decoder])?;
            outputs.push(ScaleOutput {
                divisor: head.divisor,
                logits,
            });
        }
        Ok(ForwardOutput { outputs, traces })
    }

    /// Inference convenience: logits per head as plain tensors, finest first.
    pub fn predict(&self, x: &Tensor<f32>) -> Result<Vec<(usize, Tensor<f32>)>> {
        let mut tape = Tape::<f32>::new();
        let params = self.registry.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &params, xv, false)?;
        Ok(out
            .outputs
            .iter()
            .map(|o| (o.divisor, tape.value(o.logits).clone()))
            .collect())
    }

    /// Runs `forward` in `f64` and returns the traces of every stage.
    pub fn trace(&self, x: &Tensor<f32>) -> Result<Vec<(String, FctLayerTrace)>> {
        let mut tape = Tape::<f64>::new();
        let params = self.registry.bind(&mut tape, false);
        let xv = tape.constant(x.cast());
        Ok(self.forward(&mut tape, &params, xv, true)?.traces)
    }

    pub fn stages(&self) -> impl Iterator<Item = (&'static str, &FctLayer)> {
        self.encoders
            .iter()
            .chain(std::iter::once(&self.bottleneck))
            .chain(self.decoders.iter())
            .enumerate()
            .map(|(i, l)| (STAGE_NAMES[i], l))
    }
}
