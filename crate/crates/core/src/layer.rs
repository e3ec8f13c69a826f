//! The FCT layer: norm/conv stem, convolutional attention, Wide-Focus.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, ConvAttention, FctLayerTrace};
use crate::error::{FctError, Result};
use crate::nn::{Conv2d, LayerNorm};
use crate::params::ParamInit;
use crate::tape::{Tape, Var};
use crate::tensor::Element;
use crate::wide_focus::{WideFocus, WideFocusConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Stem ends in a 2×2 max-pool; halves the spatial extent.
    Encoder,
    /// No pooling; preserves the spatial extent.
    Bottleneck,
    /// 2× upsample and skip concatenation before the stem; doubles the extent.
    Decoder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FctLayerConfig {
    pub filters: usize,
    pub attention: AttentionConfig,
    pub wf: WideFocusConfig,
    pub variant: Variant,
    pub stem_kernel: usize,
}

impl FctLayerConfig {
    pub fn new(variant: Variant, filters: usize, heads: usize) -> Self {
        FctLayerConfig {
            filters,
            attention: AttentionConfig::new(filters, heads),
            wf: WideFocusConfig::default(),
            variant,
            stem_kernel: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.attention.channels != self.filters {
            return Err(FctError::config(format!(
                "attention channels {} must equal layer filters {}",
                self.attention.channels, self.filters
            )));
        }
        self.attention.validate()?;
        self.wf.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FctLayer {
    pub cfg: FctLayerConfig,
    /// Channels entering the stem (after skip concatenation for decoders).
    pub in_channels: usize,
    /// Absent for single-channel input, where a channel-axis norm would
    /// erase the signal.
    pub stem_norm: Option<LayerNorm>,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub attention: ConvAttention,
    pub wide_focus: WideFocus,
}

pub struct LayerOutput {
    pub y: Var,
    /// Stem output before pooling (equal to the stem output for non-encoders).
    pub stem: Var,
    pub trace: Option<FctLayerTrace>,
}

impl FctLayer {
    /// `in_channels` counts every channel the stem sees, including any skip.
    pub fn new(init: &mut ParamInit<'_>, in_channels: usize, cfg: FctLayerConfig) -> Result<Self> {
        cfg.validate()?;
        let f = cfg.filters;
        let stem_norm = if in_channels > 1 {
            Some(LayerNorm::new(init, "stem_norm", in_channels)?)
        } else {
            None
        };
        let conv1 = Conv2d::same(init, "conv1", in_channels, f, cfg.stem_kernel)?;
        let conv2 = Conv2d::same(init, "conv2", f, f, cfg.stem_kernel)?;
        let attention = ConvAttention::new(&mut init.scope("attention"), cfg.attention.clone())?;
        let wide_focus = WideFocus::new(&mut init.scope("wide_focus"), f, cfg.wf.clone())?;
        Ok(FctLayer {
            cfg,
            in_channels,
            stem_norm,
            conv1,
            conv2,
            attention,
            wide_focus,
        })
    }

    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        x: Var,
        skip: Option<Var>,
        trace: bool,
    ) -> Result<LayerOutput> {
        let mut h = x;
        match (self.cfg.variant, skip) {
            (Variant::Decoder, Some(s)) => {
                let up = tape.upsample_nearest(x, 2)?;
                let (su, ss) = (tape.shape(up), tape.shape(s));
                if su[..3] != ss[..3] {
                    return Err(FctError::shape(format!(
                        "decoder skip {ss:?} does not match upsampled input {su:?}"
                    )));
                }
                h = tape.concat_channels(up, s)?;
            }
            (Variant::Decoder, None) => {
                return Err(FctError::invalid("decoder layer requires a skip tensor"));
            }
            (_, Some(_)) => {
                return Err(FctError::invalid("only decoder layers take a skip tensor"));
            }
            (_, None) => {}
        }
        let sh = tape.shape(h).to_vec();
        if sh.len() != 4 || sh[3] != self.in_channels {
            return Err(FctError::shape(format!(
                "FCT layer expects {} stem channels, got {sh:?}",
                self.in_channels
            )));
        }
        if let Some(norm) = &self.stem_norm {
            h = norm.forward(tape, params, h)?;
        }
        h = self.conv1.forward(tape, params, h)?;
        h = tape.gelu(h)?;
        h = self.conv2.forward(tape, params, h)?;
        h = tape.gelu(h)?;
        let stem = h;
        if self.cfg.variant == Variant::Encoder {
            if sh[1] % 2 != 0 || sh[2] % 2 != 0 {
                return Err(FctError::shape(format!(
                    "encoder layer needs even spatial extents before pooling, got {sh:?}"
                )));
            }
            h = tape.max_pool2d(h, 2)?;
        }
        let (z_attn, attn_trace) = self.attention.forward(tape, params, h, trace)?;
        let (wf, z_out) = self.wide_focus.forward_residual(tape, params, z_attn)?;
        let trace = attn_trace.map(|a| FctLayerTrace {
            z_prev: a.z_prev,
            z_qkv: a.z_qkv,
            attention_path: a.attention_path,
            v_residual: a.v_residual,
            z_attn: tape.value(z_attn).cast(),
            wide_focus: tape.value(wf).cast(),
            z_out: tape.value(z_out).cast(),
        });
        Ok(LayerOutput { y: z_out, stem, trace })
    }

    pub fn param_count(&self) -> usize {
        self.stem_norm.as_ref().map_or(0, LayerNorm::param_count)
            + self.conv1.param_count()
            + self.conv2.param_count()
            + self.attention.param_count()
            + self.wide_focus.param_count()
    }

    /// Output extent for input extent `n` along one axis.
    pub fn out_extent(&self, n: usize) -> usize {
        match self.cfg.variant {
            Variant::Encoder => n / 2,
            Variant::Bottleneck => n,
            Variant::Decoder => n * 2,
        }
    }

    /// FLOPs for one image whose layer input is `h×w` (before any upsample).
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let (sh, sw) = match self.cfg.variant {
            Variant::Decoder => (2 * h, 2 * w),
            _ => (h, w),
        };
        let f = self.cfg.filters;
        let mut total = 0u64;
        if self.stem_norm.is_some() {
            total += 5 * (sh * sw * self.in_channels) as u64;
        }
        total += self.conv1.flops(sh, sw) + self.conv2.flops(sh, sw);
        total += 2 * 10 * (sh * sw * f) as u64;
        let (ah, aw) = match self.cfg.variant {
            Variant::Encoder => (sh / 2, sw / 2),
            _ => (sh, sw),
        };
        total + self.attention.flops(ah, aw) + self.wide_focus.flops(ah, aw)
    }
}
