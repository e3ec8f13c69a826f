//! Differentiable layer primitives shared by every FCT component.

use crate::error::{FctError, Result};
use crate::kernels::Padding;
use crate::params::{ParamId, ParamInit, ParamRegistry};
use crate::tape::{ConvSpec, Tape, Var};
use crate::tensor::Element;

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// A 2-D convolution with kernel `[K_h,K_w,C_in/groups,C_out]` and bias
/// `[C_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub kernel_size: (usize, usize),
    pub c_in: usize,
    pub c_out: usize,
    pub spec: ConvSpec,
}

impl Conv2d {
    /// Kernel drawn from `U(−1/√fan_in, 1/√fan_in)`, bias zero.
    pub fn new(
        init: &mut ParamInit<'_>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel_size: (usize, usize),
        spec: ConvSpec,
    ) -> Result<Self> {
        if spec.groups == 0 || c_in % spec.groups != 0 || c_out % spec.groups != 0 {
            return Err(FctError::config(format!(
                "{name}: groups {} must divide C_in {c_in} and C_out {c_out}",
                spec.groups
            )));
        }
        if spec.dilation.0 == 0 || spec.dilation.1 == 0 || spec.stride.0 == 0 || spec.stride.1 == 0 {
            return Err(FctError::config(format!("{name}: stride and dilation must be ≥ 1")));
        }
        let cg = c_in / spec.groups;
        let fan_in = kernel_size.0 * kernel_size.1 * cg;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut s = init.scope(name);
        let kernel = s.uniform("kernel", vec![kernel_size.0, kernel_size.1, cg, c_out], bound)?;
        let bias = s.zeros("bias", vec![c_out])?;
        Ok(Conv2d {
            kernel,
            bias,
            kernel_size,
            c_in,
            c_out,
            spec,
        })
    }

    /// Square-kernel, same-padded, stride-1 convolution.
    pub fn same(init: &mut ParamInit<'_>, name: &str, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        Self::new(init, name, c_in, c_out, (k, k), ConvSpec::default())
    }

    /// 1×1 positionwise linear map.
    pub fn pointwise(init: &mut ParamInit<'_>, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Self::same(init, name, c_in, c_out, 1)
    }

    /// One filter per channel, no cross-channel mixing.
    pub fn depthwise(
        init: &mut ParamInit<'_>,
        name: &str,
        channels: usize,
        k: usize,
        stride: usize,
    ) -> Result<Self> {
        Self::new(
            init,
            name,
            channels,
            channels,
            (k, k),
            ConvSpec {
                stride: (stride, stride),
                groups: channels,
                ..ConvSpec::default()
            },
        )
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, params: &[Var], x: Var) -> Result<Var> {
        let c = tape.shape(x).last().copied().unwrap_or(0);
        if c != self.c_in {
            return Err(FctError::shape(format!(
                "conv2d expects {} input channels, got shape {:?}",
                self.c_in,
                tape.shape(x)
            )));
        }
        tape.conv2d(x, params[self.kernel.0], Some(params[self.bias.0]), self.spec)
    }

    pub fn param_count(&self) -> usize {
        self.kernel_size.0 * self.kernel_size.1 * (self.c_in / self.spec.groups) * self.c_out + self.c_out
    }

    /// Output extent along one spatial axis for input extent `n`.
    pub fn out_extent(&self, n: usize, axis: usize) -> usize {
        let (k, s, d) = if axis == 0 {
            (self.kernel_size.0, self.spec.stride.0, self.spec.dilation.0)
        } else {
            (self.kernel_size.1, self.spec.stride.1, self.spec.dilation.1)
        };
        match self.spec.padding {
            Padding::Same | Padding::SameTopLeft => n.div_ceil(s),
            Padding::Valid => (n - (k + (k - 1) * (d - 1))) / s + 1,
        }
    }

    /// `2·H_out·W_out·C_out·K_h·K_w·C_in/groups` for one image.
    pub fn flops(&self, out_h: usize, out_w: usize) -> u64 {
        2 * (out_h * out_w * self.c_out * self.kernel_size.0 * self.kernel_size.1 * (self.c_in / self.spec.groups))
            as u64
    }
}

/// Layer normalization over the channel (last) axis.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(init: &mut ParamInit<'_>, name: &str, channels: usize) -> Result<Self> {
        let mut s = init.scope(name);
        let gamma = s.ones("gamma", vec![channels])?;
        let beta = s.zeros("beta", vec![channels])?;
        Ok(LayerNorm {
            gamma,
            beta,
            channels,
            eps: LAYER_NORM_EPS,
        })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, params: &[Var], x: Var) -> Result<Var> {
        tape.layer_norm(x, params[self.gamma.0], params[self.beta.0], self.eps)
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

/// Helper for layer tests: runs a builder against a fresh registry.
pub fn build_with<M>(
    seed: u64,
    f: impl FnOnce(&mut ParamInit<'_>) -> Result<M>,
) -> Result<(M, ParamRegistry)> {
    use rand::SeedableRng;
    let mut reg = ParamRegistry::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let m = {
        let mut init = ParamInit::new(&mut reg, &mut rng);
        f(&mut init)?
    };
    Ok((m, reg))
}
