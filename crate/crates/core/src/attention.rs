//! Convolutional attention: a depthwise-convolution token embedding followed by
//! multi-head self-attention whose q/k/v projections are depthwise convolutions.
//!
//! No positional encoding is added anywhere; all spatial awareness comes from
//! the depthwise kernels. Attention itself is permutation-equivariant over
//! tokens.

use serde::{Deserialize, Serialize};

use crate::error::{FctError, Result};
use crate::nn::{Conv2d, LayerNorm};
use crate::params::ParamInit;
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub channels: usize,
    pub heads: usize,
    /// Per-head width; `floor(channels / heads)` (at least 1) when unset.
    #[serde(default)]
    pub head_dim: Option<usize>,
    #[serde(default = "default_proj_kernel")]
    pub proj_kernel: usize,
    #[serde(default = "one")]
    pub q_stride: usize,
    #[serde(default = "one")]
    pub kv_stride: usize,
}

fn default_proj_kernel() -> usize {
    3
}

fn one() -> usize {
    1
}

impl AttentionConfig {
    pub fn new(channels: usize, heads: usize) -> Self {
        AttentionConfig {
            channels,
            heads,
            head_dim: None,
            proj_kernel: 3,
            q_stride: 1,
            kv_stride: 1,
        }
    }

    pub fn with_kv_stride(mut self, s: usize) -> Self {
        self.kv_stride = s;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
            .unwrap_or_else(|| (self.channels / self.heads.max(1)).max(1))
    }

    /// Width of the concatenated heads, `h·d`.
    pub fn inner_dim(&self) -> usize {
        self.heads * self.head_dim()
    }

    /// Attention logit scale `1/√d`.
    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.head_dim() == 0 {
            return Err(FctError::config(format!(
                "attention needs channels, heads and head_dim ≥ 1, got {self:?}"
            )));
        }
        if self.q_stride == 0 || self.kv_stride == 0 || self.proj_kernel == 0 {
            return Err(FctError::config("attention strides and kernel must be ≥ 1"));
        }
        if self.kv_stride % self.q_stride != 0 {
            return Err(FctError::config(format!(
                "kv_stride {} must be a multiple of q_stride {}",
                self.kv_stride, self.q_stride
            )));
        }
        Ok(())
    }

    /// Grid extent of role tokens for a `h×w` input.
    pub fn grid(&self, h: usize, w: usize, stride: usize) -> (usize, usize) {
        (h.div_ceil(stride), w.div_ceil(stride))
    }
}

/// Token sequence plus the spatial grid it was flattened from.
#[derive(Clone, Copy, Debug)]
pub struct TokenMap {
    /// `[N, H_t·W_t, C_t]`
    pub tokens: Var,
    pub height: usize,
    pub width: usize,
}

impl TokenMap {
    pub fn from_map<T: Element>(tape: &mut Tape<T>, map: Var) -> Result<Self> {
        let s = tape.shape(map).to_vec();
        if s.len() != 4 {
            return Err(FctError::shape(format!("token map wants NHWC, got {s:?}")));
        }
        let tokens = tape.reshape(map, &[s[0], s[1] * s[2], s[3]])?;
        Ok(TokenMap {
            tokens,
            height: s[1],
            width: s[2],
        })
    }

    pub fn to_map<T: Element>(&self, tape: &mut Tape<T>) -> Result<Var> {
        let s = tape.shape(self.tokens).to_vec();
        tape.reshape(self.tokens, &[s[0], self.height, self.width, s[2]])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Query,
    Key,
    Value,
}

/// Intermediate activations of one FCT layer, kept when tracing is on.
#[derive(Clone, Debug)]
pub struct FctLayerTrace {
    /// Input to the attention block, `z_{l-1}`.
    pub z_prev: Tensor<f64>,
    /// Projected q, k, v token tensors `[N, T_role, h·d]`.
    pub z_qkv: [Tensor<f64>; 3],
    /// Attention path after the output map, before the residual.
    pub attention_path: Tensor<f64>,
    /// v-projection mapped back to `C` and brought to the query grid.
    pub v_residual: Tensor<f64>,
    /// `z'_l = attention_path + v_residual`.
    pub z_attn: Tensor<f64>,
    /// Wide-Focus output before its residual.
    pub wide_focus: Tensor<f64>,
    /// `z_l = wide_focus + z'_l`.
    pub z_out: Tensor<f64>,
}

/// Attention-block part of a trace; the layer fills in the rest.
pub struct AttentionTrace {
    pub z_prev: Tensor<f64>,
    pub z_qkv: [Tensor<f64>; 3],
    pub attention_path: Tensor<f64>,
    pub v_residual: Tensor<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvAttention {
    pub cfg: AttentionConfig,
    pub embed: Conv2d,
    pub embed_norm: LayerNorm,
    pub q_depthwise: Conv2d,
    pub k_depthwise: Conv2d,
    pub v_depthwise: Conv2d,
    pub q_pointwise: Conv2d,
    pub k_pointwise: Conv2d,
    pub v_pointwise: Conv2d,
    pub out: Conv2d,
}

fn snapshot<T: Element>(tape: &Tape<T>, v: Var) -> Tensor<f64> {
    tape.value(v).cast()
}

/// `softmax(q·kᵀ·scale)` over the key axis. `q: [.., T_q, d]`, `k: [.., T_kv, d]`.
pub fn attention_weights<T: Element>(tape: &mut Tape<T>, q: Var, k: Var, scale: f64) -> Result<Var> {
    let (sq, sk) = (tape.shape(q).to_vec(), tape.shape(k).to_vec());
    if sq.len() < 2 || sk.len() != sq.len() || sq.last() != sk.last() {
        return Err(FctError::shape(format!(
            "attention: query {sq:?} and key {sk:?} head widths differ"
        )));
    }
    let nd = sk.len();
    let mut order: Vec<usize> = (0..nd).collect();
    order.swap(nd - 2, nd - 1);
    let kt = tape.permute(k, &order)?;
    let qs = tape.mul_scalar(q, scale)?;
    let logits = tape.matmul(qs, kt)?;
    tape.softmax(logits)
}

/// Scaled dot-product attention on per-head tensors `[N, h, T, d]`.
pub fn mhsa<T: Element>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
    let (sk, sv) = (tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if sk[..sk.len() - 1] != sv[..sv.len() - 1] {
        return Err(FctError::shape(format!(
            "attention: key {sk:?} and value {sv:?} token counts differ"
        )));
    }
    let a = attention_weights(tape, q, k, scale)?;
    tape.matmul(a, v)
}

impl ConvAttention {
    pub fn new(init: &mut ParamInit<'_>, cfg: AttentionConfig) -> Result<Self> {
        cfg.validate()?;
        let (c, k, inner) = (cfg.channels, cfg.proj_kernel, cfg.inner_dim());
        Ok(ConvAttention {
            embed: Conv2d::depthwise(init, "embed", c, k, 1)?,
            embed_norm: LayerNorm::new(init, "embed_norm", c)?,
            q_depthwise: Conv2d::depthwise(init, "q_depthwise", c, k, cfg.q_stride)?,
            k_depthwise: Conv2d::depthwise(init, "k_depthwise", c, k, cfg.kv_stride)?,
            v_depthwise: Conv2d::depthwise(init, "v_depthwise", c, k, cfg.kv_stride)?,
            q_pointwise: Conv2d::pointwise(init, "q_pointwise", c, inner)?,
            k_pointwise: Conv2d::pointwise(init, "k_pointwise", c, inner)?,
            v_pointwise: Conv2d::pointwise(init, "v_pointwise", c, inner)?,
            out: Conv2d::pointwise(init, "out", inner, c)?,
            cfg,
        })
    }

    /// Depthwise conv → layer norm → flatten.
    pub fn patch_embed<T: Element>(&self, tape: &mut Tape<T>, params: &[Var], x: Var) -> Result<TokenMap> {
        let c = tape.shape(x).last().copied();
        if c != Some(self.cfg.channels) {
            return Err(FctError::shape(format!(
                "patch_embed expects {} channels, got shape {:?}",
                self.cfg.channels,
                tape.shape(x)
            )));
        }
        let e = self.embed.forward(tape, params, x)?;
        let e = self.embed_norm.forward(tape, params, e)?;
        TokenMap::from_map(tape, e)
    }

    /// Per-role depthwise conv plus head-forming pointwise map. Returns
    /// `[N, T_role, h·d]` tokens and the role's grid.
    pub fn conv_project<T: Element>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        tokens: &TokenMap,
        role: Role,
    ) -> Result<TokenMap> {
        let (dw, pw, stride) = match role {
            Role::Query => (&self.q_depthwise, &self.q_pointwise, self.cfg.q_stride),
            Role::Key => (&self.k_depthwise, &self.k_pointwise, self.cfg.kv_stride),
            Role::Value => (&self.v_depthwise, &self.v_pointwise, self.cfg.kv_stride),
        };
        if stride > tokens.height || stride > tokens.width {
            return Err(FctError::shape(format!(
                "{role:?} stride {stride} exceeds token grid {}×{}",
                tokens.height, tokens.width
            )));
        }
        let map = tokens.to_map(tape)?;
        let m = dw.forward(tape, params, map)?;
        let m = pw.forward(tape, params, m)?;
        TokenMap::from_map(tape, m)
    }

    /// `[N, T, h·d]` → `[N, h, T, d]`.
    fn split_heads<T: Element>(&self, tape: &mut Tape<T>, t: Var) -> Result<Var> {
        let s = tape.shape(t).to_vec();
        let (h, d) = (self.cfg.heads, self.cfg.head_dim());
        let r = tape.reshape(t, &[s[0], s[1], h, d])?;
        tape.permute(r, &[0, 2, 1, 3])
    }

    /// Returns `z'_l` on the query grid, plus the trace pieces when asked.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        z_prev: Var,
        trace: bool,
    ) -> Result<(Var, Option<AttentionTrace>)> {
        let n = tape.shape(z_prev)[0];
        let tokens = self.patch_embed(tape, params, z_prev)?;
        let q = self.conv_project(tape, params, &tokens, Role::Query)?;
        let k = self.conv_project(tape, params, &tokens, Role::Key)?;
        let v = self.conv_project(tape, params, &tokens, Role::Value)?;

        let (qh, kh, vh) = (
            self.split_heads(tape, q.tokens)?,
            self.split_heads(tape, k.tokens)?,
            self.split_heads(tape, v.tokens)?,
        );
        let heads = mhsa(tape, qh, kh, vh, self.cfg.scale())?;
        let merged = tape.permute(heads, &[0, 2, 1, 3])?;
        let merged = tape.reshape(merged, &[n, q.height, q.width, self.cfg.inner_dim()])?;
        let attention_path = self.out.forward(tape, params, merged)?;

        let v_map = v.to_map(tape)?;
        let mut v_res = self.out.forward(tape, params, v_map)?;
        let factor = self.cfg.kv_stride / self.cfg.q_stride;
        if factor > 1 {
            v_res = tape.upsample_nearest(v_res, factor)?;
            if v.height * factor != q.height || v.width * factor != q.width {
                return Err(FctError::shape(format!(
                    "kv grid {}×{} does not tile query grid {}×{} at factor {factor}",
                    v.height, v.width, q.height, q.width
                )));
            }
        }
        let z_attn = tape.add(attention_path, v_res)?;
        let trace = trace.then(|| AttentionTrace {
            z_prev: snapshot(tape, z_prev),
            z_qkv: [
                snapshot(tape, q.tokens),
                snapshot(tape, k.tokens),
                snapshot(tape, v.tokens),
            ],
            attention_path: snapshot(tape, attention_path),
            v_residual: snapshot(tape, v_res),
        });
        Ok((z_attn, trace))
    }

    pub fn param_count(&self) -> usize {
        [
            &self.embed,
            &self.q_depthwise,
            &self.k_depthwise,
            &self.v_depthwise,
            &self.q_pointwise,
            &self.k_pointwise,
            &self.v_pointwise,
            &self.out,
        ]
        .iter()
        .map(|c| c.param_count())
        .sum::<usize>()
            + self.embed_norm.param_count()
    }

    /// FLOPs for one image at `h×w`.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let cfg = &self.cfg;
        let (c, d, heads) = (cfg.channels, cfg.head_dim(), cfg.heads);
        let (qh, qw) = cfg.grid(h, w, cfg.q_stride);
        let (kh, kw) = cfg.grid(h, w, cfg.kv_stride);
        let (tq, tkv) = ((qh * qw) as u64, (kh * kw) as u64);
        let mut f = self.embed.flops(h, w) + 5 * (h * w * c) as u64;
        f += self.q_depthwise.flops(qh, qw) + self.q_pointwise.flops(qh, qw);
        f += self.k_depthwise.flops(kh, kw) + self.k_pointwise.flops(kh, kw);
        f += self.v_depthwise.flops(kh, kw) + self.v_pointwise.flops(kh, kw);
        // q·kᵀ and A·v, then softmax as an activation over the score matrix
        f += 2 * (2 * tq * tkv * d as u64) * heads as u64;
        f += 10 * tq * tkv * heads as u64;
        f += self.out.flops(qh, qw) + self.out.flops(kh, kw);
        f
    }
}
