//! Reverse-mode automatic differentiation over a linear recording tape.
//!
//! Every op appends a node holding its output value and enough saved state to
//! run its backward rule. Nodes are only ever appended, so an op's inputs are
//! always recorded before it and `backward` is a single reverse sweep.

use std::collections::HashMap;

use crate::error::{FctError, Result};
use crate::kernels::{self, ConvGeom, ConvSaved, Padding};
use crate::tensor::{inverse_permutation, numel_of, strides_of, Element, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

/// How the right operand of an elementwise op lines up with the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    None,
    /// Right operand is `[C]`, repeated over every leading position.
    Channel,
}

enum Op<T: Element> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        p: usize,
        /// `b` is a single 2-D matrix shared by every batch entry.
        shared_rhs: bool,
    },
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        bcast: Broadcast,
    },
    AddScalar {
        a: Var,
    },
    MulScalar {
        a: Var,
        s: T,
    },
    Reduce {
        a: Var,
        kind: ReduceKind,
        /// Output flat index for each input element.
        map: Vec<u32>,
        count: usize,
        argmax: Option<Vec<u32>>,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        order: Vec<usize>,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        saved: ConvSaved<T>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    AvgPool {
        x: Var,
        factor: usize,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Gelu {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    LogSoftmax {
        x: Var,
    },
}

impl<T: Element> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Binary { .. } => "elementwise",
            Op::AddScalar { .. } => "add_scalar",
            Op::MulScalar { .. } => "mul_scalar",
            Op::Reduce { .. } => "reduce",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Conv2d { .. } => "conv2d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MaxPool { .. } => "max_pool2d",
            Op::AvgPool { .. } => "avg_pool2d",
            Op::Upsample { .. } => "upsample_nearest",
            Op::Concat { .. } => "concat_channels",
            Op::Gelu { .. } => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
        }
    }
}

struct Node<T: Element> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Gradients of a scalar loss with respect to every leaf that requires them.
#[derive(Debug, Default)]
pub struct Gradients<T: Element> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Parameters of a 2-D convolution, independent of the input shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
    pub padding: Padding,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec {
            stride: (1, 1),
            dilation: (1, 1),
            groups: 1,
            padding: Padding::Same,
        }
    }
}

pub const GELU_COEF: f64 = 0.044715;

pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn nhwc(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    <[usize; 4]>::try_from(shape)
        .map_err(|_| FctError::shape(format!("{what} expects NHWC input, got {shape:?}")))
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(FctError::NonFinite(format!(
                "{} produced a non-finite value (shape {:?})",
                op.name(),
                value.shape()
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ----- linear algebra -------------------------------------------------

    /// Batched matrix product `[..,M,K]·[..,K,P]`. Leading extents must be
    /// equal, or `b` may be a plain 2-D matrix shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || FctError::shape(format!("matmul: cannot multiply {sa:?} by {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, p) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let shared_rhs = lead_b.is_empty() && !lead_a.is_empty();
        if !shared_rhs && lead_a != lead_b {
            return Err(mismatch());
        }
        let batch = numel_of(lead_a);
        let mut out = vec![T::zero(); batch * m * p];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                let boff = if shared_rhs { 0 } else { i * k * p };
                T::gemm(
                    m,
                    k,
                    p,
                    &av[i * m * k..],
                    (k as isize, 1),
                    &bv[boff..],
                    (p as isize, 1),
                    T::zero(),
                    &mut out[i * m * p..],
                    (p as isize, 1),
                );
            }
        }
        let mut shape = lead_a.to_vec();
        shape.extend([m, p]);
        self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                p,
                shared_rhs,
            },
            &[a, b],
        )
    }

    // ----- elementwise ----------------------------------------------------

    /// Elementwise op. `b` must match `a`'s shape or be a `[C]` vector over
    /// `a`'s trailing axis.
    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bcast = if sa == sb {
            Broadcast::None
        } else if sb.len() == 1 && sa.last() == Some(&sb[0]) {
            Broadcast::Channel
        } else {
            return Err(FctError::shape(format!(
                "{kind:?}: shapes {sa:?} and {sb:?} are not compatible"
            )));
        };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        if kind == BinaryKind::Div && bv.iter().any(|v| v.is_zero()) {
            return Err(FctError::invalid("division by a tensor containing zero"));
        }
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let out: Vec<T> = match bcast {
            Broadcast::None => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Channel => av
                .iter()
                .zip(bv.iter().cycle())
                .map(|(&x, &y)| f(x, y))
                .collect(),
        };
        let shape = self.shape(a).to_vec();
        self.push(
            Tensor::from_parts(shape, out),
            Op::Binary { kind, a, b, bcast },
            &[a, b],
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::from_f64_lossy(s);
        let out = self.value(a).map(|v| v + s);
        self.push(out, Op::AddScalar { a }, &[a])
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::from_f64_lossy(s);
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::MulScalar { a, s }, &[a])
    }

    /// Divides by a scalar; zero divisors are rejected.
    pub fn div_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        if s == 0.0 {
            return Err(FctError::invalid("division by zero scalar"));
        }
        self.mul_scalar(a, 1.0 / s)
    }

    // ----- reductions -----------------------------------------------------

    /// Reduces over `axes` (removed from the output shape). An empty axis
    /// list is the identity.
    pub fn reduce(&mut self, a: Var, axes: &[usize], kind: ReduceKind) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut reduced = vec![false; shape.len()];
        for &ax in axes {
            if ax >= shape.len() {
                return Err(FctError::shape(format!(
                    "reduce axis {ax} out of range for shape {shape:?}"
                )));
            }
            if reduced[ax] {
                return Err(FctError::shape(format!("reduce axis {ax} given twice")));
            }
            reduced[ax] = true;
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&d, _)| d)
            .collect();
        let count: usize = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| r)
            .map(|(&d, _)| d)
            .product();
        if count == 0 {
            return Err(FctError::shape("reduction over an empty axis"));
        }
        let out_strides = strides_of(&out_shape);
        // stride each input axis contributes to the output flat index
        let mut axis_out_stride = vec![0usize; shape.len()];
        let mut j = 0;
        for (i, &r) in reduced.iter().enumerate() {
            if !r {
                axis_out_stride[i] = out_strides[j];
                j += 1;
            }
        }
        let n = numel_of(&shape);
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        let mut off = 0usize;
        for _ in 0..n {
            map.push(off as u32);
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                off += axis_out_stride[ax];
                if idx[ax] < shape[ax] {
                    break;
                }
                off -= axis_out_stride[ax] * shape[ax];
                idx[ax] = 0;
            }
        }
        let on = numel_of(&out_shape);
        let av = self.value(a).data();
        let (out, argmax) = match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                let mut out = vec![T::zero(); on];
                for (&v, &o) in av.iter().zip(&map) {
                    out[o as usize] = out[o as usize] + v;
                }
                if kind == ReduceKind::Mean {
                    let c = T::from_usize(count).unwrap();
                    out.iter_mut().for_each(|v| *v = *v / c);
                }
                (out, None)
            }
            ReduceKind::Max => {
                let mut out = vec![T::neg_infinity(); on];
                let mut arg = vec![0u32; on];
                // strict comparison in flat order: first maximum wins ties
                for (i, (&v, &o)) in av.iter().zip(&map).enumerate() {
                    if v > out[o as usize] {
                        out[o as usize] = v;
                        arg[o as usize] = i as u32;
                    }
                }
                (out, Some(arg))
            }
        };
        self.push(
            Tensor::from_parts(out_shape, out),
            Op::Reduce {
                a,
                kind,
                map,
                count,
                argmax,
            },
            &[a],
        )
    }

    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(a, axes, ReduceKind::Sum)
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(a, axes, ReduceKind::Mean)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.sum(a, &axes)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.mean(a, &axes)
    }

    // ----- layout ---------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape.to_vec())?;
        self.push(out, Op::Reshape { a }, &[a])
    }

    pub fn permute(&mut self, a: Var, order: &[usize]) -> Result<Var> {
        let out = self.value(a).permute(order)?;
        self.push(
            out,
            Op::Permute {
                a,
                order: order.to_vec(),
            },
            &[a],
        )
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(FctError::shape(format!(
                "concat_channels: leading extents differ between {sa:?} and {sb:?}"
            )));
        }
        let (c1, c2) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows = numel_of(&sa[..sa.len() - 1]);
        let mut out = Vec::with_capacity(rows * (c1 + c2));
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for r in 0..rows {
                out.extend_from_slice(&av[r * c1..(r + 1) * c1]);
                out.extend_from_slice(&bv[r * c2..(r + 1) * c2]);
            }
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = c1 + c2;
        self.push(Tensor::from_parts(shape, out), Op::Concat { a, b }, &[a, b])
    }

    // ----- convolution and spatial ops -------------------------------------

    /// NHWC cross-correlation with kernel `[K_h,K_w,C_in/groups,C_out]` and
    /// optional `[C_out]` bias.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        self.conv2d_impl(x, kernel, bias, spec, false)
    }

    /// Same as [`Tape::conv2d`] but never takes the depthwise or pointwise
    /// fast paths. Exposed so the fast paths can be checked against it.
    pub fn conv2d_reference(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    ) -> Result<Var> {
        self.conv2d_impl(x, kernel, bias, spec, true)
    }

    fn conv2d_impl(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        spec: ConvSpec,
        force_im2col: bool,
    ) -> Result<Var> {
        let geom = ConvGeom::resolve(
            self.shape(x),
            self.shape(kernel),
            spec.stride,
            spec.dilation,
            spec.groups,
            spec.padding,
        )?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.c_out] {
                return Err(FctError::shape(format!(
                    "conv2d bias shape {:?} does not match {} output channels",
                    self.shape(b),
                    geom.c_out
                )));
            }
        }
        let (out, saved) = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
            force_im2col,
        );
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        self.push(
            Tensor::from_parts(geom.out_shape().to_vec(), out),
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
                saved,
            },
            &inputs,
        )
    }

    pub fn max_pool2d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = nhwc(self.shape(x), "max_pool2d")?;
        if factor == 0 || s[1] % factor != 0 || s[2] % factor != 0 {
            return Err(FctError::shape(format!(
                "max_pool2d: spatial extents of {s:?} not divisible by {factor}"
            )));
        }
        let (out, argmax) = kernels::max_pool_forward(self.value(x).data(), s, factor);
        let shape = vec![s[0], s[1] / factor, s[2] / factor, s[3]];
        self.push(Tensor::from_parts(shape, out), Op::MaxPool { x, argmax }, &[x])
    }

    pub fn avg_pool2d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = nhwc(self.shape(x), "avg_pool2d")?;
        if factor == 0 || s[1] % factor != 0 || s[2] % factor != 0 {
            return Err(FctError::shape(format!(
                "avg_pool2d: spatial extents of {s:?} not divisible by {factor}"
            )));
        }
        let out = kernels::avg_pool_forward(self.value(x).data(), s, factor);
        let shape = vec![s[0], s[1] / factor, s[2] / factor, s[3]];
        self.push(Tensor::from_parts(shape, out), Op::AvgPool { x, factor }, &[x])
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = nhwc(self.shape(x), "upsample_nearest")?;
        if factor == 0 {
            return Err(FctError::invalid("upsample factor must be positive"));
        }
        let out = kernels::upsample_forward(self.value(x).data(), s, factor);
        let shape = vec![s[0], s[1] * factor, s[2] * factor, s[3]];
        self.push(Tensor::from_parts(shape, out), Op::Upsample { x, factor }, &[x])
    }

    // ----- normalization and activations ------------------------------------

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(FctError::invalid("layer_norm epsilon must be positive"));
        }
        let shape = self.shape(x).to_vec();
        let c = *shape
            .last()
            .ok_or_else(|| FctError::shape("layer_norm on a scalar"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(FctError::shape(format!(
                "layer_norm: gamma {:?} / beta {:?} do not match {c} channels",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let eps = T::from_f64_lossy(eps);
        let cn = T::from_usize(c).unwrap();
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / c;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(c) {
            let mu = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / cn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (i, &v) in row.iter().enumerate() {
                let h = (v - mu) * r;
                xhat.push(h);
                out.push(h * g[i] + b[i]);
            }
        }
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu_scalar);
        self.push(out, Op::Gelu { x }, &[x])
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = softmax_rows(self.value(x), false)?;
        self.push(out, Op::Softmax { x }, &[x])
    }

    /// Softmax over an arbitrary axis, via permutes around the last-axis op.
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let nd = self.shape(x).len();
        if axis >= nd {
            return Err(FctError::shape(format!("softmax axis {axis} out of range")));
        }
        if axis + 1 == nd {
            return self.softmax(x);
        }
        let mut order: Vec<usize> = (0..nd).filter(|&a| a != axis).collect();
        order.push(axis);
        let moved = self.permute(x, &order)?;
        let s = self.softmax(moved)?;
        self.permute(s, &inverse_permutation(&order))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let out = softmax_rows(self.value(x), true)?;
        self.push(out, Op::LogSoftmax { x }, &[x])
    }

    // ----- backward ---------------------------------------------------------

    /// Gradients of scalar `loss` with respect to every `requires_grad` leaf.
    /// Leaves the loss does not depend on get zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| FctError::Autodiff("loss is not on this tape".into()))?;
        if node.value.numel() != 1 {
            return Err(FctError::Autodiff(format!(
                "loss must be scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(FctError::Autodiff(
                "loss does not depend on any leaf that requires grad".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_op(id, &g, &mut grads)?;
        }
        let mut out = HashMap::new();
        for (id, node) in self.nodes[..=loss.0].iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let g = grads[id]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                out.insert(Var(id), Tensor::from_parts(node.value.shape().to_vec(), g));
            }
        }
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        debug_assert_eq!(contrib.len(), self.nodes[v.0].value.numel());
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e = *e + c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_op(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                p,
                shared_rhs,
            } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        let boff = if shared_rhs { 0 } else { i * k * p };
                        T::gemm(
                            m,
                            p,
                            k,
                            &g[i * m * p..],
                            (p as isize, 1),
                            &bv[boff..],
                            (1, p as isize),
                            T::zero(),
                            &mut da[i * m * k..],
                            (k as isize, 1),
                        );
                    }
                    self.accumulate(grads, a, da);
                }
                if self.wants(b) {
                    // dB = Aᵀ · dC, summed over the batch when B is shared
                    let mut db = vec![T::zero(); self.value(b).numel()];
                    for i in 0..batch {
                        let (boff, beta) = if shared_rhs {
                            (0, if i == 0 { T::zero() } else { T::one() })
                        } else {
                            (i * k * p, T::zero())
                        };
                        T::gemm(
                            k,
                            m,
                            p,
                            &av[i * m * k..],
                            (1, k as isize),
                            &g[i * m * p..],
                            (p as isize, 1),
                            beta,
                            &mut db[boff..],
                            (p as isize, 1),
                        );
                    }
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Binary { kind, a, b, bcast } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let bidx = |i: usize| match bcast {
                    Broadcast::None => i,
                    Broadcast::Channel => i % bv.len(),
                };
                if self.wants(a) {
                    let da: Vec<T> = match kind {
                        BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
                        BinaryKind::Mul => g.iter().enumerate().map(|(i, &gi)| gi * bv[bidx(i)]).collect(),
                        BinaryKind::Div => g.iter().enumerate().map(|(i, &gi)| gi / bv[bidx(i)]).collect(),
                    };
                    self.accumulate(grads, a, da);
                }
                if self.wants(b) {
                    let mut db = vec![T::zero(); bv.len()];
                    for (i, &gi) in g.iter().enumerate() {
                        let j = bidx(i);
                        let d = match kind {
                            BinaryKind::Add => gi,
                            BinaryKind::Sub => -gi,
                            BinaryKind::Mul => gi * av[i],
                            BinaryKind::Div => -gi * av[i] / (bv[j] * bv[j]),
                        };
                        db[j] = db[j] + d;
                    }
                    self.accumulate(grads, b, db);
                }
            }
            &Op::AddScalar { a } => {
                if self.wants(a) {
                    self.accumulate(grads, a, g.to_vec());
                }
            }
            &Op::MulScalar { a, s } => {
                if self.wants(a) {
                    self.accumulate(grads, a, g.iter().map(|&v| v * s).collect());
                }
            }
            Op::Reduce {
                a,
                kind,
                map,
                count,
                argmax,
            } => {
                let a = *a;
                if self.wants(a) {
                    let n = self.value(a).numel();
                    let da = match kind {
                        ReduceKind::Sum => map.iter().map(|&o| g[o as usize]).collect(),
                        ReduceKind::Mean => {
                            let c = T::from_usize(*count).unwrap();
                            map.iter().map(|&o| g[o as usize] / c).collect()
                        }
                        ReduceKind::Max => {
                            let mut da = vec![T::zero(); n];
                            for (o, &i) in argmax.as_ref().unwrap().iter().enumerate() {
                                da[i as usize] = da[i as usize] + g[o];
                            }
                            da
                        }
                    };
                    self.accumulate(grads, a, da);
                }
            }
            &Op::Reshape { a } => {
                if self.wants(a) {
                    self.accumulate(grads, a, g.to_vec());
                }
            }
            Op::Permute { a, order } => {
                let a = *a;
                if self.wants(a) {
                    let gt = Tensor::from_parts(node.value.shape().to_vec(), g.to_vec());
                    let back = gt.permute(&inverse_permutation(order))?;
                    self.accumulate(grads, a, back.into_vec());
                }
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
                saved,
            } => {
                let (x, kernel, bias) = (*x, *kernel, *bias);
                let r = kernels::conv2d_backward(
                    g,
                    self.value(x).data(),
                    self.value(kernel).data(),
                    saved,
                    geom,
                    self.wants(x),
                    self.wants(kernel),
                    bias.is_some_and(|b| self.wants(b)),
                );
                if let Some(dx) = r.dx {
                    self.accumulate(grads, x, dx);
                }
                if let Some(dk) = r.dkernel {
                    self.accumulate(grads, kernel, dk);
                }
                if let (Some(b), Some(db)) = (bias, r.dbias) {
                    self.accumulate(grads, b, db);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let gv = self.value(gamma).data();
                let c = gv.len();
                let cn = T::from_usize(c).unwrap();
                if self.wants(gamma) || self.wants(beta) {
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for i in 0..c {
                            dg[i] = dg[i] + grow[i] * hrow[i];
                            db[i] = db[i] + grow[i];
                        }
                    }
                    if self.wants(gamma) {
                        self.accumulate(grads, gamma, dg);
                    }
                    if self.wants(beta) {
                        self.accumulate(grads, beta, db);
                    }
                }
                if self.wants(x) {
                    let mut dx = Vec::with_capacity(g.len());
                    for ((grow, hrow), &r) in g.chunks(c).zip(xhat.chunks(c)).zip(rstd) {
                        // dx = r/C · (C·dh − Σdh − x̂·Σ(dh·x̂)), dh = g·γ
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for i in 0..c {
                            let dh = grow[i] * gv[i];
                            sum_dh = sum_dh + dh;
                            sum_dh_h = sum_dh_h + dh * hrow[i];
                        }
                        for i in 0..c {
                            let dh = grow[i] * gv[i];
                            dx.push(r / cn * (cn * dh - sum_dh - hrow[i] * sum_dh_h));
                        }
                    }
                    self.accumulate(grads, x, dx);
                }
            }
            Op::MaxPool { x, argmax } => {
                let x = *x;
                if self.wants(x) {
                    let mut dx = vec![T::zero(); self.value(x).numel()];
                    for (&i, &gi) in argmax.iter().zip(g) {
                        dx[i as usize] = dx[i as usize] + gi;
                    }
                    self.accumulate(grads, x, dx);
                }
            }
            &Op::AvgPool { x, factor } => {
                if self.wants(x) {
                    let s = nhwc(self.shape(x), "avg_pool2d")?;
                    self.accumulate(grads, x, kernels::avg_pool_backward(g, s, factor));
                }
            }
            &Op::Upsample { x, factor } => {
                if self.wants(x) {
                    let s = nhwc(self.shape(x), "upsample_nearest")?;
                    self.accumulate(grads, x, kernels::upsample_backward(g, s, factor));
                }
            }
            &Op::Concat { a, b } => {
                let c1 = *self.shape(a).last().unwrap();
                let c2 = *self.shape(b).last().unwrap();
                let (mut da, mut db) = (Vec::new(), Vec::new());
                for row in g.chunks(c1 + c2) {
                    da.extend_from_slice(&row[..c1]);
                    db.extend_from_slice(&row[c1..]);
                }
                if self.wants(a) {
                    self.accumulate(grads, a, da);
                }
                if self.wants(b) {
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Gelu { x } => {
                if self.wants(x) {
                    let xv = self.value(x).data();
                    let dx = xv.iter().zip(g).map(|(&v, &gi)| gi * gelu_grad(v)).collect();
                    self.accumulate(grads, x, dx);
                }
            }
            &Op::Softmax { x } => {
                if self.wants(x) {
                    let y = node.value.data();
                    let c = *node.value.shape().last().unwrap();
                    let mut dx = Vec::with_capacity(y.len());
                    for (yrow, grow) in y.chunks(c).zip(g.chunks(c)) {
                        let dot: T = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                        dx.extend(yrow.iter().zip(grow).map(|(&yi, &gi)| yi * (gi - dot)));
                    }
                    self.accumulate(grads, x, dx);
                }
            }
            &Op::LogSoftmax { x } => {
                if self.wants(x) {
                    let ly = node.value.data();
                    let c = *node.value.shape().last().unwrap();
                    let mut dx = Vec::with_capacity(ly.len());
                    for (lrow, grow) in ly.chunks(c).zip(g.chunks(c)) {
                        let gs: T = grow.iter().copied().sum();
                        dx.extend(lrow.iter().zip(grow).map(|(&l, &gi)| gi - l.exp() * gs));
                    }
                    self.accumulate(grads, x, dx);
                }
            }
        }
        Ok(())
    }
}

pub fn gelu_scalar<T: Element>(x: T) -> T {
    let k = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let c = T::from_f64_lossy(GELU_COEF);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_grad<T: Element>(x: T) -> T {
    let k = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let c = T::from_f64_lossy(GELU_COEF);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + three * c * x * x)
}

fn softmax_rows<T: Element>(x: &Tensor<T>, log: bool) -> Result<Tensor<T>> {
    let c = *x
        .shape()
        .last()
        .ok_or_else(|| FctError::shape("softmax on a scalar"))?;
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(c.max(1)) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - m).exp()).sum();
        if log {
            let lz = z.ln();
            out.extend(row.iter().map(|&v| v - m - lz));
        } else {
            out.extend(row.iter().map(|&v| (v - m).exp() / z));
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}
