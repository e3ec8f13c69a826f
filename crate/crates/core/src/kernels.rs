//! Raw NHWC kernels behind the tape ops. Buffers in, buffers out; no autodiff
//! bookkeeping here.

use serde::{Deserialize, Serialize};

use crate::error::{FctError, Result};
use crate::tensor::Element;

/// How a convolution pads its input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Output extent `ceil(in / stride)`; odd padding puts the extra pixel
    /// on the bottom/right.
    Same,
    /// As `Same`, but the extra pixel goes on the top/left.
    SameTopLeft,
    /// No padding.
    Valid,
}

/// Resolved convolution geometry for one input shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub c_out: usize,
    pub groups: usize,
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn resolve_axis(
    extent: usize,
    k: usize,
    stride: usize,
    dilation: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    let eff = k + (k - 1) * (dilation - 1);
    match padding {
        Padding::Valid => {
            if eff > extent {
                return Err(FctError::shape(format!(
                    "effective kernel {eff} larger than input extent {extent}"
                )));
            }
            Ok(((extent - eff) / stride + 1, 0))
        }
        Padding::Same | Padding::SameTopLeft => {
            let out = extent.div_ceil(stride);
            let total = ((out - 1) * stride + eff).saturating_sub(extent);
            if eff > extent + total {
                return Err(FctError::shape(format!(
                    "effective kernel {eff} larger than padded extent {}",
                    extent + total
                )));
            }
            let before = if padding == Padding::Same {
                total / 2
            } else {
                total - total / 2
            };
            Ok((out, before))
        }
    }
}

impl ConvGeom {
    /// `input` is `[N,H,W,C_in]`, `kernel` is `[K_h,K_w,C_in/groups,C_out]`.
    pub fn resolve(
        input: &[usize],
        kernel: &[usize],
        stride: (usize, usize),
        dilation: (usize, usize),
        groups: usize,
        padding: Padding,
    ) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(FctError::shape(format!(
                "conv2d wants NHWC input and 4-D kernel, got {input:?} and {kernel:?}"
            )));
        }
        let (n, h, w, c_in) = (input[0], input[1], input[2], input[3]);
        let (kh, kw, cg, c_out) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(FctError::shape(format!(
                "groups {groups} must divide C_in {c_in} and C_out {c_out}"
            )));
        }
        if cg != c_in / groups {
            return Err(FctError::shape(format!(
                "kernel {kernel:?} expects {cg} channels per group, input {input:?} with {groups} groups gives {}",
                c_in / groups
            )));
        }
        if stride.0 == 0 || stride.1 == 0 || dilation.0 == 0 || dilation.1 == 0 || kh == 0 || kw == 0
        {
            return Err(FctError::invalid("stride, dilation and kernel extents must be positive"));
        }
        let (out_h, pad_top) = resolve_axis(h, kh, stride.0, dilation.0, padding)?;
        let (out_w, pad_left) = resolve_axis(w, kw, stride.1, dilation.1, padding)?;
        Ok(ConvGeom {
            n,
            h,
            w,
            c_in,
            kh,
            kw,
            c_out,
            groups,
            stride,
            dilation,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.out_h, self.out_w, self.c_out]
    }

    fn rows(&self) -> usize {
        self.n * self.out_h * self.out_w
    }

    fn cg(&self) -> usize {
        self.c_in / self.groups
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.cg()
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.c_in && self.groups == self.c_out && self.groups > 1
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1
            && self.kw == 1
            && self.stride == (1, 1)
            && self.groups == 1
            && self.pad_top == 0
            && self.pad_left == 0
    }

    /// Input row/col for output position and kernel tap, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, axis: usize) -> Option<usize> {
        let (stride, dil, pad, extent) = if axis == 0 {
            (self.stride.0, self.dilation.0, self.pad_top, self.h)
        } else {
            (self.stride.1, self.dilation.1, self.pad_left, self.w)
        };
        let pos = (o * stride + k * dil) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Saved state a convolution needs for its backward pass.
pub enum ConvSaved<T> {
    /// Pointwise: the input itself is the column matrix.
    Input,
    /// Per-group column matrices, group-major.
    Columns(Vec<T>),
    Depthwise,
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (rows, patch, cg) = (g.rows(), g.patch(), g.cg());
    let mut col = vec![T::zero(); g.groups * rows * patch];
    for grp in 0..g.groups {
        let base = grp * rows * patch;
        let mut r = 0;
        for n in 0..g.n {
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let row = &mut col[base + r * patch..base + (r + 1) * patch];
                    for i in 0..g.kh {
                        let Some(ih) = g.src(oh, i, 0) else { continue };
                        for j in 0..g.kw {
                            let Some(iw) = g.src(ow, j, 1) else { continue };
                            let src = ((n * g.h + ih) * g.w + iw) * g.c_in + grp * cg;
                            let dst = (i * g.kw + j) * cg;
                            row[dst..dst + cg].copy_from_slice(&x[src..src + cg]);
                        }
                    }
                    r += 1;
                }
            }
        }
    }
    col
}

fn col2im<T: Element>(dcol: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (rows, patch, cg) = (g.rows(), g.patch(), g.cg());
    for grp in 0..g.groups {
        let base = grp * rows * patch;
        let mut r = 0;
        for n in 0..g.n {
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let row = &dcol[base + r * patch..base + (r + 1) * patch];
                    for i in 0..g.kh {
                        let Some(ih) = g.src(oh, i, 0) else { continue };
                        for j in 0..g.kw {
                            let Some(iw) = g.src(ow, j, 1) else { continue };
                            let dst = ((n * g.h + ih) * g.w + iw) * g.c_in + grp * cg;
                            let src = (i * g.kw + j) * cg;
                            for (d, &s) in dx[dst..dst + cg].iter_mut().zip(&row[src..src + cg]) {
                                *d = *d + s;
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

fn add_bias<T: Element>(out: &mut [T], bias: Option<&[T]>) {
    if let Some(b) = bias {
        for row in out.chunks_mut(b.len()) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o = *o + bv;
            }
        }
    }
}

pub fn conv2d_forward<T: Element>(
    x: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
    force_im2col: bool,
) -> (Vec<T>, ConvSaved<T>) {
    let rows = g.rows();
    let mut out = vec![T::zero(); rows * g.c_out];
    if g.is_depthwise() && !force_im2col {
        depthwise_forward(x, kernel, g, &mut out);
        add_bias(&mut out, bias);
        return (out, ConvSaved::Depthwise);
    }
    if g.is_pointwise() && !force_im2col {
        T::gemm(
            rows,
            g.c_in,
            g.c_out,
            x,
            (g.c_in as isize, 1),
            kernel,
            (g.c_out as isize, 1),
            T::zero(),
            &mut out,
            (g.c_out as isize, 1),
        );
        add_bias(&mut out, bias);
        return (out, ConvSaved::Input);
    }
    let col = im2col(x, g);
    let (patch, cog) = (g.patch(), g.c_out / g.groups);
    for grp in 0..g.groups {
        T::gemm(
            rows,
            patch,
            cog,
            &col[grp * rows * patch..],
            (patch as isize, 1),
            &kernel[grp * cog..],
            (g.c_out as isize, 1),
            T::zero(),
            &mut out[grp * cog..],
            (g.c_out as isize, 1),
        );
    }
    add_bias(&mut out, bias);
    (out, ConvSaved::Columns(col))
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dkernel: Option<Vec<T>>,
    pub dbias: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Element>(
    dout: &[T],
    x: &[T],
    kernel: &[T],
    saved: &ConvSaved<T>,
    g: &ConvGeom,
    need_dx: bool,
    need_dk: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let rows = g.rows();
    let dbias = need_db.then(|| {
        let mut db = vec![T::zero(); g.c_out];
        for row in dout.chunks(g.c_out) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d = *d + v;
            }
        }
        db
    });
    let (dx, dkernel) = match saved {
        ConvSaved::Depthwise => {
            let (dx, dk) = depthwise_backward(dout, x, kernel, g, need_dx, need_dk);
            (dx, dk)
        }
        ConvSaved::Input => {
            let dk = need_dk.then(|| {
                let mut dk = vec![T::zero(); g.c_in * g.c_out];
                T::gemm(
                    g.c_in,
                    rows,
                    g.c_out,
                    x,
                    (1, g.c_in as isize),
                    dout,
                    (g.c_out as isize, 1),
                    T::zero(),
                    &mut dk,
                    (g.c_out as isize, 1),
                );
                dk
            });
            let dx = need_dx.then(|| {
                let mut dx = vec![T::zero(); rows * g.c_in];
                T::gemm(
                    rows,
                    g.c_out,
                    g.c_in,
                    dout,
                    (g.c_out as isize, 1),
                    kernel,
                    (1, g.c_out as isize),
                    T::zero(),
                    &mut dx,
                    (g.c_in as isize, 1),
                );
                dx
            });
            (dx, dk)
        }
        ConvSaved::Columns(col) => {
            let (patch, cog) = (g.patch(), g.c_out / g.groups);
            let dk = need_dk.then(|| {
                let mut dk = vec![T::zero(); patch * g.c_out];
                for grp in 0..g.groups {
                    T::gemm(
                        patch,
                        rows,
                        cog,
                        &col[grp * rows * patch..],
                        (1, patch as isize),
                        &dout[grp * cog..],
                        (g.c_out as isize, 1),
                        T::zero(),
                        &mut dk[grp * cog..],
                        (g.c_out as isize, 1),
                    );
                }
                dk
            });
            let dx = need_dx.then(|| {
                let mut dcol = vec![T::zero(); g.groups * rows * patch];
                for grp in 0..g.groups {
                    T::gemm(
                        rows,
                        cog,
                        patch,
                        &dout[grp * cog..],
                        (g.c_out as isize, 1),
                        &kernel[grp * cog..],
                        (1, g.c_out as isize),
                        T::zero(),
                        &mut dcol[grp * rows * patch..],
                        (patch as isize, 1),
                    );
                }
                let mut dx = vec![T::zero(); g.n * g.h * g.w * g.c_in];
                col2im(&dcol, g, &mut dx);
                dx
            });
            (dx, dk)
        }
    };
    ConvGrads { dx, dkernel, dbias }
}

fn depthwise_forward<T: Element>(x: &[T], kernel: &[T], g: &ConvGeom, out: &mut [T]) {
    let c = g.c_in;
    for n in 0..g.n {
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let o = ((n * g.out_h + oh) * g.out_w + ow) * c;
                let orow = &mut out[o..o + c];
                for i in 0..g.kh {
                    let Some(ih) = g.src(oh, i, 0) else { continue };
                    for j in 0..g.kw {
                        let Some(iw) = g.src(ow, j, 1) else { continue };
                        let s = ((n * g.h + ih) * g.w + iw) * c;
                        let k = (i * g.kw + j) * c;
                        for ((o, &xv), &kv) in orow.iter_mut().zip(&x[s..s + c]).zip(&kernel[k..k + c]) {
                            *o = *o + xv * kv;
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward<T: Element>(
    dout: &[T],
    x: &[T],
    kernel: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dk: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let c = g.c_in;
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dk = need_dk.then(|| vec![T::zero(); kernel.len()]);
    for n in 0..g.n {
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let o = ((n * g.out_h + oh) * g.out_w + ow) * c;
                let drow = &dout[o..o + c];
                for i in 0..g.kh {
                    let Some(ih) = g.src(oh, i, 0) else { continue };
                    for j in 0..g.kw {
                        let Some(iw) = g.src(ow, j, 1) else { continue };
                        let s = ((n * g.h + ih) * g.w + iw) * c;
                        let k = (i * g.kw + j) * c;
                        if let Some(dx) = dx.as_mut() {
                            for ((d, &dv), &kv) in dx[s..s + c].iter_mut().zip(drow).zip(&kernel[k..k + c]) {
                                *d = *d + dv * kv;
                            }
                        }
                        if let Some(dk) = dk.as_mut() {
                            for ((d, &dv), &xv) in dk[k..k + c].iter_mut().zip(drow).zip(&x[s..s + c]) {
                                *d = *d + dv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dk)
}

/// Non-overlapping `f×f` windows. Returns output and the flat input index of
/// each window's first maximum.
pub fn max_pool_forward<T: Element>(x: &[T], shape: [usize; 4], f: usize) -> (Vec<T>, Vec<u32>) {
    let [n, h, w, c] = shape;
    let (oh, ow) = (h / f, w / f);
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut arg = Vec::with_capacity(n * oh * ow * c);
    for b in 0..n {
        for y in 0..oh {
            for xo in 0..ow {
                for ch in 0..c {
                    let mut best = T::neg_infinity();
                    let mut best_i = 0usize;
                    // row-major window scan keeps the lowest flat index on ties
                    for i in 0..f {
                        for j in 0..f {
                            let idx = ((b * h + y * f + i) * w + xo * f + j) * c + ch;
                            if x[idx] > best {
                                best = x[idx];
                                best_i = idx;
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i as u32);
                }
            }
        }
    }
    (out, arg)
}

pub fn avg_pool_forward<T: Element>(x: &[T], shape: [usize; 4], f: usize) -> Vec<T> {
    let [n, h, w, c] = shape;
    let (oh, ow) = (h / f, w / f);
    let scale = T::one() / T::from_usize(f * f).unwrap();
    let mut out = vec![T::zero(); n * oh * ow * c];
    for b in 0..n {
        for y in 0..h {
            for xi in 0..w {
                let s = ((b * h + y) * w + xi) * c;
                let o = ((b * oh + y / f) * ow + xi / f) * c;
                for ch in 0..c {
                    out[o + ch] = out[o + ch] + x[s + ch] * scale;
                }
            }
        }
    }
    out
}

pub fn avg_pool_backward<T: Element>(dout: &[T], in_shape: [usize; 4], f: usize) -> Vec<T> {
    let [n, h, w, c] = in_shape;
    let (oh, ow) = (h / f, w / f);
    let scale = T::one() / T::from_usize(f * f).unwrap();
    let mut dx = vec![T::zero(); n * h * w * c];
    for b in 0..n {
        for y in 0..h {
            for xi in 0..w {
                let s = ((b * h + y) * w + xi) * c;
                let o = ((b * oh + y / f) * ow + xi / f) * c;
                for ch in 0..c {
                    dx[s + ch] = dout[o + ch] * scale;
                }
            }
        }
    }
    dx
}

pub fn upsample_forward<T: Element>(x: &[T], shape: [usize; 4], f: usize) -> Vec<T> {
    let [n, h, w, c] = shape;
    let (oh, ow) = (h * f, w * f);
    let mut out = Vec::with_capacity(n * oh * ow * c);
    for b in 0..n {
        for y in 0..oh {
            for xo in 0..ow {
                let s = ((b * h + y / f) * w + xo / f) * c;
                out.extend_from_slice(&x[s..s + c]);
            }
        }
    }
    out
}

pub fn upsample_backward<T: Element>(dout: &[T], in_shape: [usize; 4], f: usize) -> Vec<T> {
    let [n, h, w, c] = in_shape;
    let (oh, ow) = (h * f, w * f);
    let mut dx = vec![T::zero(); n * h * w * c];
    for b in 0..n {
        for y in 0..oh {
            for xo in 0..ow {
                let s = ((b * h + y / f) * w + xo / f) * c;
                let o = ((b * oh + y) * ow + xo) * c;
                for ch in 0..c {
                    dx[s + ch] = dx[s + ch] + dout[o + ch];
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_extents() {
        for k in [1usize, 3, 4] {
            for d in 1..=4 {
                let g = ConvGeom::resolve(&[1, 9, 7, 2], &[k, k, 2, 3], (1, 1), (d, d), 1, Padding::Same)
                    .unwrap();
                assert_eq!((g.out_h, g.out_w), (9, 7), "k={k} d={d}");
            }
        }
        let g = ConvGeom::resolve(&[1, 8, 8, 4], &[3, 3, 1, 4], (2, 2), (1, 1), 4, Padding::Same).unwrap();
        assert_eq!((g.out_h, g.out_w), (4, 4));
    }

    #[test]
    fn even_kernel_padding_sides() {
        let g = ConvGeom::resolve(&[1, 6, 6, 1], &[4, 4, 1, 1], (1, 1), (1, 1), 1, Padding::Same).unwrap();
        assert_eq!(g.pad_top, 1);
        let g =
            ConvGeom::resolve(&[1, 6, 6, 1], &[4, 4, 1, 1], (1, 1), (1, 1), 1, Padding::SameTopLeft).unwrap();
        assert_eq!(g.pad_top, 2);
    }

    #[test]
    fn oversized_valid_kernel_is_rejected() {
        let err = ConvGeom::resolve(&[1, 2, 2, 1], &[3, 3, 1, 1], (1, 1), (1, 1), 1, Padding::Valid);
        assert!(err.is_err());
    }

    #[test]
    fn depthwise_matches_grouped_im2col() {
        let x: Vec<f64> = (0..2 * 5 * 5 * 3).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let k: Vec<f64> = (0..3 * 3 * 3).map(|i| ((i * 13 % 7) as f64) * 0.25 - 0.5).collect();
        let g = ConvGeom::resolve(&[2, 5, 5, 3], &[3, 3, 1, 3], (2, 2), (1, 1), 3, Padding::Same).unwrap();
        let (direct, _) = conv2d_forward(&x, &k, None, &g, false);
        let (grouped, _) = conv2d_forward(&x, &k, None, &g, true);
        assert_eq!(direct, grouped);
    }
}
