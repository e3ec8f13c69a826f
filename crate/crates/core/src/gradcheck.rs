//! Central finite-difference gradient checking.
//!
//! The oracle rebuilds the whole graph in `f64` for every probe, so it shares
//! nothing with the tape's backward rules except the forward definitions.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FctError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Multiple of the central-difference round-off bound `ε·|f|/h` used as the
/// smallest denominator in [`relative_error_floored`]. Derivatives below it
/// are indistinguishable from zero at the chosen step.
pub const ROUNDOFF_MARGIN: f64 = 1e5;

/// Relative error `|a−b| / max(|a|, |b|, 1e−8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    relative_error_floored(a, b, 1e-8)
}

/// Relative error `|a−b| / max(|a|, |b|, floor)`.
pub fn relative_error_floored(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Denominator floor for a probe whose objective has magnitude `f`.
pub fn roundoff_floor(f: f64, step: f64) -> f64 {
    (ROUNDOFF_MARGIN * f64::EPSILON * f.abs() / step).max(1e-8)
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Probe at most this many coordinates per input (all when `None`).
    pub max_probes: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: DEFAULT_STEP,
            max_probes: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max relative error per input, in input order.
    pub per_input: Vec<f64>,
    pub probes: usize,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_error() < tol
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>], grad: bool) -> Result<(f64, Option<Vec<Tensor<f64>>>)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out).item()?;
    if !value.is_finite() {
        return Err(FctError::NonFinite("grad_check objective is not finite".into()));
    }
    if !grad {
        return Ok((value, None));
    }
    let grads = tape.backward(out)?;
    let g = vars
        .iter()
        .map(|&v| grads.get(v).cloned().expect("leaf gradient"))
        .collect();
    Ok((value, Some(g)))
}

/// Compares tape gradients of the scalar `f` against central differences for
/// every input tensor. The relative error of each probe uses
/// [`roundoff_floor`] so that exactly-zero derivatives are not scored on
/// floating-point noise.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (value, analytic) = evaluate(&f, inputs, true)?;
    let analytic = analytic.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut probes = 0;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match opts.max_probes {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut worst: f64 = 0.0;
        for j in coords {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + opts.step;
            let (plus, _) = evaluate(&f, &work, false)?;
            work[i].data_mut()[j] = orig - opts.step;
            let (minus, _) = evaluate(&f, &work, false)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let floor = roundoff_floor(value.abs().max(plus.abs()).max(minus.abs()), opts.step);
            worst = worst.max(relative_error_floored(analytic[i].data()[j], numeric, floor));
            probes += 1;
        }
        per_input.push(worst);
    }
    Ok(GradCheckReport { per_input, probes })
}

/// Single-input form: max relative error over all components of `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let opts = GradCheckOptions {
        step,
        ..Default::default()
    };
    let report = grad_check_many(|t, v| f(t, v[0]), std::slice::from_ref(x), &opts)?;
    Ok(report.max_error())
}

/// Reduces any tensor to a scalar with fixed pseudo-random weights, so every
/// output element contributes a distinct, order-one sensitivity.
pub fn weighted_sum(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let w = tape.constant(Tensor::uniform(shape, 0.5, 1.5, &mut rng));
    let p = tape.mul(x, w)?;
    tape.sum_all(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::<f64>::from_fn(vec![3, 4], |i| i as f64 * 0.37 - 1.0);
        let err = grad_check(|t, v| t.sum_all(v), &x, DEFAULT_STEP).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn square_matches() {
        let x = Tensor::<f64>::from_fn(vec![5], |i| i as f64 - 2.2);
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                t.sum_all(sq)
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Tensor::<f64>::from_fn(vec![2], |_| 1e308);
        let res = grad_check(
            |t, v| {
                let y = t.mul_scalar(v, 10.0)?;
                t.sum_all(y)
            },
            &x,
            DEFAULT_STEP,
        );
        assert!(res.is_err());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.5) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn roundoff_floor_absorbs_noise_but_not_errors() {
        let floor = roundoff_floor(26.6, DEFAULT_STEP);
        // one ulp of f over 2h, against an exact zero
        assert!(relative_error_floored(1e-17, 1.8e-10, floor) < DEFAULT_TOLERANCE);
        // a 1% mistake on a small but resolvable derivative
        assert!(relative_error_floored(1e-3, 1.01e-3, floor) > DEFAULT_TOLERANCE);
        assert_eq!(roundoff_floor(0.0, DEFAULT_STEP), 1e-8);
    }
}
