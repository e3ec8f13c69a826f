//! Combined cross-entropy + soft-dice loss over the deep-supervision heads.

use crate::error::{FctError, Result};
use crate::model::ScaleOutput;
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

pub const DICE_SMOOTH: f64 = 1e-6;

/// Nearest downsampling of `[N,H,W]` labels by an integer factor, keeping the
/// top-left pixel of each cell.
pub fn downsample_mask(mask: &[u16], [n, h, w]: [usize; 3], factor: usize) -> Vec<u16> {
    if factor == 1 {
        return mask.to_vec();
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Vec::with_capacity(n * oh * ow);
    for b in 0..n {
        for y in 0..oh {
            for x in 0..ow {
                out.push(mask[(b * h + y * factor) * w + x * factor]);
            }
        }
    }
    out
}

/// `[N,H,W,K]` one-hot encoding; labels must be below `k`.
pub fn one_hot<T: Element>(mask: &[u16], [n, h, w]: [usize; 3], k: usize) -> Result<Tensor<T>> {
    if mask.len() != n * h * w {
        return Err(FctError::shape(format!(
            "mask has {} labels, expected {n}×{h}×{w}",
            mask.len()
        )));
    }
    let mut data = vec![T::zero(); mask.len() * k];
    for (i, &m) in mask.iter().enumerate() {
        if m as usize >= k {
            return Err(FctError::invalid(format!("class index {m} is not below K = {k}")));
        }
        data[i * k + m as usize] = T::one();
    }
    Tensor::new(vec![n, h, w, k], data)
}

/// `0.5·CE + 0.5·(1 − soft dice)` for one head. Dice is computed over the
/// whole batch per class and averaged over the foreground classes.
pub fn head_loss<T: Element>(tape: &mut Tape<T>, logits: Var, target: &Tensor<T>) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.as_slice() != target.shape() {
        return Err(FctError::shape(format!(
            "logits {s:?} and one-hot target {:?} differ",
            target.shape()
        )));
    }
    let (k, pixels) = (s[3], s[0] * s[1] * s[2]);
    let y = tape.constant(target.clone());

    let logp = tape.log_softmax(logits)?;
    let ylogp = tape.mul(y, logp)?;
    let ce = tape.sum_all(ylogp)?;
    let ce = tape.mul_scalar(ce, -1.0 / pixels as f64)?;

    let p = tape.softmax(logits)?;
    let py = tape.mul(p, y)?;
    let inter = tape.sum(py, &[0, 1, 2])?;
    let num = tape.mul_scalar(inter, 2.0)?;
    let num = tape.add_scalar(num, DICE_SMOOTH)?;
    let sp = tape.sum(p, &[0, 1, 2])?;
    let sy = tape.sum(y, &[0, 1, 2])?;
    let den = tape.add(sp, sy)?;
    let den = tape.add_scalar(den, DICE_SMOOTH)?;
    let dice = tape.div(num, den)?;
    let fg = Tensor::from_fn(vec![k], |c| {
        if c == 0 {
            T::zero()
        } else {
            T::from_f64_lossy(1.0 / (k - 1) as f64)
        }
    });
    let fg = tape.constant(fg);
    let dice = tape.mul(dice, fg)?;
    let dice = tape.sum_all(dice)?;

    // 0.5·ce + 0.5·(1 − dice)
    let half_ce = tape.mul_scalar(ce, 0.5)?;
    let half_dice = tape.mul_scalar(dice, -0.5)?;
    let l = tape.add(half_ce, half_dice)?;
    tape.add_scalar(l, 0.5)
}

/// Equal-weight average of [`head_loss`] over every head, each against the
/// full-resolution `[N,H,W]` mask downsampled to its scale.
pub fn combined_loss<T: Element>(tape: &mut Tape<T>, heads: &[ScaleOutput], mask: &[u16], dims: [usize; 3]) -> Result<Var> {
    if heads.is_empty() {
        return Err(FctError::invalid("combined_loss needs at least one head"));
    }
    let mut total: Option<Var> = None;
    for head in heads {
        let s = tape.shape(head.logits).to_vec();
        let [n, h, w] = dims;
        if s[0] != n || s[1] * head.divisor != h || s[2] * head.divisor != w {
            return Err(FctError::shape(format!(
                "head at 1/{} has logits {s:?}, mask is {dims:?}",
                head.divisor
            )));
        }
        let m = downsample_mask(mask, dims, head.divisor);
        let y = one_hot::<T>(&m, [n, s[1], s[2]], s[3])?;
        let l = head_loss(tape, head.logits, &y)?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    tape.div_scalar(total.unwrap(), heads.len() as f64)
}
