//! Per-stage parameter and FLOP table for the default 224×224 model, plus the
//! same network evaluated at another input size.

use fct::model::{FctModel, ModelConfig};
use fct::profile::{profile, profile_at};

fn main() -> fct::Result<()> {
    let model = FctModel::new(ModelConfig::default(), 0)?;
    let report = profile(&model);
    println!("{}", report.table());

    let cmp = report.compare_reference();
    println!(
        "published: {:.1}M params, {:.2} GFLOPs; this build: {:.2}M params, {:.2} GFLOPs",
        cmp.reference_params / 1e6,
        cmp.reference_gflops,
        cmp.measured_params as f64 / 1e6,
        cmp.measured_gflops
    );

    let big = profile_at(&model, [448, 448]);
    println!("at 448×448: {:.2} GFLOPs, params unchanged ({})", big.gflops(), big.param_count);
    Ok(())
}
