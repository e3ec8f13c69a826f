//! The finite-difference gradient suite: every tape primitive plus the
//! composite blocks (attention, Wide-Focus, an encoder layer, the loss),
//! checked in `f64` on seeded random inputs.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{AttentionConfig, ConvAttention};
use crate::error::Result;
use crate::gradcheck::{grad_check_many, weighted_sum, GradCheckOptions, DEFAULT_STEP, DEFAULT_TOLERANCE};
use crate::kernels::Padding;
use crate::layer::{FctLayer, FctLayerConfig, Variant};
use crate::model::ScaleOutput;
use crate::nn::build_with;
use crate::params::ParamRegistry;
use crate::tape::{ConvSpec, ReduceKind, Tape, Var};
use crate::tensor::Tensor;
use crate::train::loss::combined_loss;
use crate::wide_focus::{WideFocus, WideFocusConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// Smallest shapes that exercise every code path.
    Tiny,
    /// Up to 8×8 spatial extents.
    Small,
}

impl std::str::FromStr for Scale {
    type Err = crate::FctError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Scale::Tiny),
            "small" => Ok(Scale::Small),
            _ => Err(crate::FctError::invalid(format!("unknown scale `{s}` (tiny|small)"))),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleCase {
    pub name: String,
    pub max_error: f64,
    pub probes: usize,
    pub passed: bool,
    pub seconds: f64,
}

pub fn random64(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Registry contents as `f64`, each jittered so biases and norm affine terms
/// are not sitting at their special initial values.
pub fn jittered_params(registry: &ParamRegistry, seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    registry
        .cast::<f64>()
        .into_iter()
        .map(|t| {
            let noise = Tensor::<f64>::uniform(t.shape().to_vec(), -0.2, 0.2, &mut rng);
            Tensor::new(t.shape().to_vec(), t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect()).unwrap()
        })
        .collect()
}

struct Suite {
    seed: u64,
    cases: Vec<OracleCase>,
}

impl Suite {
    fn check(
        &mut self,
        name: &str,
        inputs: Vec<Tensor<f64>>,
        max_probes: Option<usize>,
        f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    ) -> Result<()> {
        let started = Instant::now();
        let salt = self.seed.wrapping_add(self.cases.len() as u64);
        let opts = GradCheckOptions {
            step: DEFAULT_STEP,
            max_probes,
            seed: salt,
        };
        let report = grad_check_many(
            |t, v| {
                let y = f(t, v)?;
                if t.shape(y).is_empty() {
                    Ok(y)
                } else {
                    weighted_sum(t, y, salt)
                }
            },
            &inputs,
            &opts,
        )?;
        self.cases.push(OracleCase {
            name: name.to_string(),
            max_error: report.max_error(),
            probes: report.probes,
            passed: report.passes(DEFAULT_TOLERANCE),
            seconds: started.elapsed().as_secs_f64(),
        });
        Ok(())
    }

    fn rand(&self, shape: &[usize], k: u64) -> Tensor<f64> {
        random64(shape, self.seed.wrapping_mul(1000).wrapping_add(k))
    }
}

/// Runs every check and returns one entry per case; a case fails when its
/// worst relative error reaches the tolerance.
pub fn run_suite(seed: u64, scale: Scale) -> Result<Vec<OracleCase>> {
    let mut s = Suite { seed, cases: Vec::new() };
    let sp = match scale {
        Scale::Tiny => 4,
        Scale::Small => 8,
    };
    let probes = match scale {
        Scale::Tiny => Some(24),
        Scale::Small => Some(48),
    };

    // primitives
    s.check("matmul", vec![s.rand(&[2, 3, 4], 1), s.rand(&[2, 4, 5], 2)], None, |t, v| t.matmul(v[0], v[1]))?;
    s.check("add", vec![s.rand(&[3, 4], 3), s.rand(&[4], 4)], None, |t, v| t.add(v[0], v[1]))?;
    s.check("sub", vec![s.rand(&[3, 4], 5), s.rand(&[3, 4], 6)], None, |t, v| t.sub(v[0], v[1]))?;
    s.check("mul", vec![s.rand(&[3, 4], 7), s.rand(&[4], 8)], None, |t, v| t.mul(v[0], v[1]))?;
    let denom = s.rand(&[3, 4], 9).map(|x| x.abs() + 0.5);
    s.check("div", vec![s.rand(&[3, 4], 10), denom], None, |t, v| t.div(v[0], v[1]))?;
    s.check("sum", vec![s.rand(&[2, 3, 4], 11)], None, |t, v| t.sum(v[0], &[0, 2]))?;
    s.check("mean", vec![s.rand(&[2, 3, 4], 12)], None, |t, v| t.mean(v[0], &[1]))?;
    s.check("max", vec![s.rand(&[2, 3, 4], 13)], None, |t, v| t.reduce(v[0], &[2], ReduceKind::Max))?;
    s.check("reshape_permute", vec![s.rand(&[2, 3, 4], 14)], None, |t, v| {
        let r = t.reshape(v[0], &[6, 4])?;
        t.permute(r, &[1, 0])
    })?;
    s.check("concat_channels", vec![s.rand(&[1, 3, 3, 2], 15), s.rand(&[1, 3, 3, 3], 16)], None, |t, v| {
        t.concat_channels(v[0], v[1])
    })?;
    s.check(
        "conv2d",
        vec![s.rand(&[1, sp, sp, 2], 17), s.rand(&[3, 3, 2, 3], 18), s.rand(&[3], 19)],
        None,
        |t, v| t.conv2d(v[0], v[1], Some(v[2]), ConvSpec::default()),
    )?;
    s.check(
        "conv2d_strided_dilated_grouped",
        vec![s.rand(&[1, sp, sp, 4], 20), s.rand(&[3, 3, 2, 4], 21)],
        None,
        |t, v| {
            let spec = ConvSpec {
                stride: (2, 2),
                dilation: (2, 2),
                groups: 2,
                padding: Padding::Same,
            };
            t.conv2d(v[0], v[1], None, spec)
        },
    )?;
    s.check(
        "conv2d_depthwise",
        vec![s.rand(&[1, sp, sp, 3], 22), s.rand(&[3, 3, 1, 3], 23), s.rand(&[3], 24)],
        None,
        |t, v| {
            let spec = ConvSpec {
                groups: 3,
                ..ConvSpec::default()
            };
            t.conv2d(v[0], v[1], Some(v[2]), spec)
        },
    )?;
    s.check(
        "conv2d_even_kernel",
        vec![s.rand(&[1, sp, sp, 2], 25), s.rand(&[4, 4, 2, 2], 26)],
        None,
        |t, v| {
            let spec = ConvSpec {
                padding: Padding::SameTopLeft,
                ..ConvSpec::default()
            };
            t.conv2d(v[0], v[1], None, spec)
        },
    )?;
    s.check("max_pool2d", vec![s.rand(&[1, sp, sp, 2], 27)], None, |t, v| t.max_pool2d(v[0], 2))?;
    s.check("avg_pool2d", vec![s.rand(&[1, sp, sp, 2], 28)], None, |t, v| t.avg_pool2d(v[0], 2))?;
    s.check("upsample_nearest", vec![s.rand(&[1, 2, 3, 2], 29)], None, |t, v| t.upsample_nearest(v[0], 2))?;
    s.check(
        "layer_norm",
        vec![s.rand(&[2, 3, 5], 30), s.rand(&[5], 31), s.rand(&[5], 32)],
        None,
        |t, v| t.layer_norm(v[0], v[1], v[2], 1e-6),
    )?;
    s.check("gelu", vec![s.rand(&[3, 4], 33).map(|x| 3.0 * x)], None, |t, v| t.gelu(v[0]))?;
    s.check("softmax", vec![s.rand(&[3, 5], 34)], None, |t, v| t.softmax(v[0]))?;
    s.check("log_softmax", vec![s.rand(&[3, 5], 35)], None, |t, v| t.log_softmax(v[0]))?;

    // composites
    let (attn, reg) = build_with(seed, |init| ConvAttention::new(init, AttentionConfig::new(4, 2)))?;
    let mut inputs = vec![s.rand(&[1, sp, sp, 4], 40)];
    inputs.extend(jittered_params(&reg, seed + 1));
    s.check("conv_attention", inputs, probes, |t, v| Ok(attn.forward(t, &v[1..], v[0], false)?.0))?;

    let (wf, reg) = build_with(seed, |init| WideFocus::new(init, 4, WideFocusConfig::default()))?;
    let mut inputs = vec![s.rand(&[1, sp, sp, 4], 41)];
    inputs.extend(jittered_params(&reg, seed + 2));
    s.check("wide_focus", inputs, probes, |t, v| wf.forward(t, &v[1..], v[0]))?;

    let (enc, reg) = build_with(seed, |init| FctLayer::new(init, 2, FctLayerConfig::new(Variant::Encoder, 4, 2)))?;
    let mut inputs = vec![s.rand(&[1, 8, 8, 2], 42)];
    inputs.extend(jittered_params(&reg, seed + 3));
    s.check("fct_encoder_layer", inputs, probes, |t, v| Ok(enc.forward(t, &v[1..], v[0], None, false)?.y))?;

    let k = 3;
    let mask: Vec<u16> = (0..16).map(|i| (i * 7 % k) as u16).collect();
    s.check("combined_loss", vec![s.rand(&[1, 4, 4, k], 43).map(|x| 2.0 * x)], None, |t, v| {
        combined_loss(t, &[ScaleOutput { divisor: 1, logits: v[0] }], &mask, [1, 4, 4])
    })?;
    Ok(s.cases)
}
