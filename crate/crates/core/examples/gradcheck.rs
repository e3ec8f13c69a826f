//! Finite-difference check of every differentiable building block, then a
//! hand-rolled check of one Wide-Focus module.

use fct::gradcheck::{grad_check_many, weighted_sum, GradCheckOptions, DEFAULT_TOLERANCE};
use fct::nn::build_with;
use fct::oracle::{jittered_params, random64, run_suite, Scale};
use fct::wide_focus::{WideFocus, WideFocusConfig};

fn main() -> fct::Result<()> {
    for case in run_suite(7, Scale::Tiny)? {
        let verdict = if case.passed { "pass" } else { "FAIL" };
        println!("{verdict} {:<28} rel err {:.2e} over {} probes", case.name, case.max_error, case.probes);
    }

    // The same machinery on a module of your own: inputs are the activation
    // followed by every parameter tensor, all in f64.
    let (wf, reg) = build_with(3, |init| WideFocus::new(init, 4, WideFocusConfig::default()))?;
    let mut inputs = vec![random64(&[1, 6, 6, 4], 1)];
    inputs.extend(jittered_params(&reg, 2));
    let report = grad_check_many(
        |tape, v| {
            let y = wf.forward(tape, &v[1..], v[0])?;
            weighted_sum(tape, y, 5)
        },
        &inputs,
        &GradCheckOptions::default(),
    )?;
    println!(
        "wide focus: max rel err {:.2e}, within {DEFAULT_TOLERANCE:e}: {}",
        report.max_error(),
        report.passes(DEFAULT_TOLERANCE)
    );
    Ok(())
}
