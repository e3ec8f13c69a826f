//! Build the small 64×64 model, run one forward pass and print what comes out.

use fct::model::{FctModel, ModelConfig};
use fct::train::predict_labels;
use fct::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> fct::Result<()> {
    let cfg = ModelConfig::desk();
    let [h, w] = cfg.input_size;
    let model = FctModel::new(cfg, 0)?;
    println!("{} parameters", model.param_count());

    let x = Tensor::uniform(vec![2, h, w, 1], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    for (divisor, logits) in model.predict(&x)? {
        println!("head at 1/{divisor}: logits {:?}", logits.shape());
    }

    let labels = predict_labels(&model, &x)?;
    let mut counts = vec![0usize; model.cfg.num_classes];
    for &l in &labels {
        counts[l as usize] += 1;
    }
    println!("untrained label histogram: {counts:?}");
    Ok(())
}
