//! Walk the Wide-Focus configuration grid: branch count, kernel shapes,
//! receptive fields and parameter counts on an 8-channel map.

use fct::nn::build_with;
use fct::wide_focus::{WideFocus, WideFocusConfig};
use fct::Tape;

fn main() -> fct::Result<()> {
    for (name, cfg) in WideFocusConfig::ablation_grid() {
        let fields: Vec<usize> = (0..cfg.branches()).map(|i| cfg.receptive_field(i)).collect();
        let (wf, reg) = build_with(0, |init| WideFocus::new(init, 8, cfg.clone()))?;

        let mut tape = Tape::<f32>::new();
        let params = reg.bind(&mut tape, false);
        let x = tape.constant(fct::oracle::random64(&[1, 16, 16, 8], 0).cast());
        let y = wf.forward(&mut tape, &params, x)?;
        println!(
            "{name:<14} branches {} receptive fields {fields:?} params {:>5} output {:?}",
            cfg.branches(),
            reg.count(),
            tape.shape(y)
        );
    }
    Ok(())
}
