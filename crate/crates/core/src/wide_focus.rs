//! Wide-Focus: parallel dilated convolution branches, summed, then passed
//! through a spatial aggregation convolution. Replaces the transformer MLP.

use serde::{Deserialize, Serialize};

use crate::error::{FctError, Result};
use crate::kernels::Padding;
use crate::nn::Conv2d;
use crate::params::ParamInit;
use crate::tape::{ConvSpec, Tape, Var};
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadType {
    /// Two pointwise convolutions.
    Mlp,
    /// Branches run along the flattened token axis.
    Conv1d,
    Conv2d,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WideFocusConfig {
    pub head_type: HeadType,
    /// One dilation rate per branch.
    pub dilations: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    /// Per-branch kernel sizes overriding `kernel`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch_kernels: Option<Vec<usize>>,
}

fn default_kernel() -> usize {
    3
}

impl Default for WideFocusConfig {
    /// Three 2-D branches with dilations 1, 2, 3.
    fn default() -> Self {
        WideFocusConfig {
            head_type: HeadType::Conv2d,
            dilations: vec![1, 2, 3],
            kernel: 3,
            branch_kernels: None,
        }
    }
}

impl WideFocusConfig {
    pub fn conv2d(branches: usize) -> Self {
        WideFocusConfig {
            head_type: HeadType::Conv2d,
            dilations: (1..=branches).collect(),
            kernel: 3,
            branch_kernels: None,
        }
    }

    pub fn conv1d(branches: usize) -> Self {
        WideFocusConfig {
            head_type: HeadType::Conv1d,
            ..Self::conv2d(branches)
        }
    }

    pub fn mlp() -> Self {
        WideFocusConfig {
            head_type: HeadType::Mlp,
            dilations: vec![1],
            kernel: 1,
            branch_kernels: None,
        }
    }

    /// Two undilated 2-D branches with kernels 3 and 4.
    pub fn mixed_kernels() -> Self {
        WideFocusConfig {
            head_type: HeadType::Conv2d,
            dilations: vec![1, 1],
            kernel: 3,
            branch_kernels: Some(vec![3, 4]),
        }
    }

    /// The ten ablation configurations: MLP, 1-D with 1–4 branches, 2-D with
    /// 1–4 branches, and 2-D with mixed 3/4 kernels.
    pub fn ablation_grid() -> Vec<(String, WideFocusConfig)> {
        let mut rows = vec![("MLP".to_string(), Self::mlp())];
        for b in 1..=4 {
            rows.push((format!("Conv1D B={b}"), Self::conv1d(b)));
        }
        for b in 1..=4 {
            rows.push((format!("Conv2D B={b}"), Self::conv2d(b)));
        }
        rows.push(("Conv2D k=3,4".to_string(), Self::mixed_kernels()));
        rows
    }

    pub fn branches(&self) -> usize {
        self.dilations.len()
    }

    pub fn branch_kernel(&self, i: usize) -> usize {
        self.branch_kernels
            .as_ref()
            .map_or(self.kernel, |k| k[i])
    }

    pub fn validate(&self) -> Result<()> {
        if self.dilations.is_empty() {
            return Err(FctError::config("wide-focus needs at least one branch"));
        }
        if self.dilations.contains(&0) || self.kernel == 0 {
            return Err(FctError::config("wide-focus dilations and kernel must be ≥ 1"));
        }
        if let Some(k) = &self.branch_kernels {
            if k.len() != self.dilations.len() || k.contains(&0) {
                return Err(FctError::config(format!(
                    "wide-focus branch_kernels {k:?} must give one positive size per branch"
                )));
            }
        }
        Ok(())
    }

    /// Receptive field side of branch `i`: `1 + (k−1)·D`.
    pub fn receptive_field(&self, i: usize) -> usize {
        1 + (self.branch_kernel(i) - 1) * self.dilations[i]
    }
}

/// Same-size padding; even kernels put the extra pixel top/left.
fn padding_for(k: usize) -> Padding {
    if k % 2 == 0 {
        Padding::SameTopLeft
    } else {
        Padding::Same
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WideFocus {
    pub cfg: WideFocusConfig,
    pub channels: usize,
    pub branches: Vec<Conv2d>,
    pub aggregate: Conv2d,
}

impl WideFocus {
    pub fn new(init: &mut ParamInit<'_>, channels: usize, cfg: WideFocusConfig) -> Result<Self> {
        cfg.validate()?;
        let mut branches = Vec::with_capacity(cfg.branches());
        let aggregate;
        match cfg.head_type {
            HeadType::Mlp => {
                branches.push(Conv2d::pointwise(init, "branch0", channels, channels)?);
                aggregate = Conv2d::pointwise(init, "aggregate", channels, channels)?;
            }
            HeadType::Conv2d | HeadType::Conv1d => {
                let one_d = cfg.head_type == HeadType::Conv1d;
                for (i, &d) in cfg.dilations.iter().enumerate() {
                    let k = cfg.branch_kernel(i);
                    let (kernel, dilation) = if one_d { ((1, k), (1, d)) } else { ((k, k), (d, d)) };
                    branches.push(Conv2d::new(
                        init,
                        &format!("branch{i}"),
                        channels,
                        channels,
                        kernel,
                        ConvSpec {
                            dilation,
                            padding: padding_for(k),
                            ..ConvSpec::default()
                        },
                    )?);
                }
                let agg_kernel = if one_d { (1, 3) } else { (3, 3) };
                aggregate = Conv2d::new(init, "aggregate", channels, channels, agg_kernel, ConvSpec::default())?;
            }
        }
        Ok(WideFocus {
            cfg,
            channels,
            branches,
            aggregate,
        })
    }

    /// Shape-preserving: `[N,H,W,C]` → `[N,H,W,C]`.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, params: &[Var], x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[3] != self.channels {
            return Err(FctError::shape(format!(
                "wide-focus expects [N,H,W,{}], got {shape:?}",
                self.channels
            )));
        }
        let input = if self.cfg.head_type == HeadType::Conv1d {
            tape.reshape(x, &[shape[0], 1, shape[1] * shape[2], shape[3]])?
        } else {
            x
        };
        let mut fused: Option<Var> = None;
        for branch in &self.branches {
            let b = branch.forward(tape, params, input)?;
            let b = tape.gelu(b)?;
            fused = Some(match fused {
                None => b,
                Some(acc) => tape.add(acc, b)?,
            });
        }
        let y = self.aggregate.forward(tape, params, fused.expect("at least one branch"))?;
        let y = tape.gelu(y)?;
        if self.cfg.head_type == HeadType::Conv1d {
            tape.reshape(y, &shape)
        } else {
            Ok(y)
        }
    }

    /// `WF(z) + z`.
    pub fn forward_residual<T: Element>(&self, tape: &mut Tape<T>, params: &[Var], z_attn: Var) -> Result<(Var, Var)> {
        let wf = self.forward(tape, params, z_attn)?;
        let out = tape.add(wf, z_attn)?;
        Ok((wf, out))
    }

    pub fn param_count(&self) -> usize {
        self.branches.iter().map(Conv2d::param_count).sum::<usize>() + self.aggregate.param_count()
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let px = (h * w * self.channels) as u64;
        let convs: u64 = self.branches.iter().map(|b| b.flops(h, w)).sum::<u64>() + self.aggregate.flops(h, w);
        // one GELU per branch plus the aggregation GELU
        convs + 10 * px * (self.branches.len() as u64 + 1)
    }
}
