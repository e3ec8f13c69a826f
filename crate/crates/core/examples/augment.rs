//! Apply a few random affine augmentations to one synthetic sample and write
//! the image/mask pairs as PNGs so alignment can be inspected by eye.

use fct::data::{synth_dataset, write_image, write_mask, FileFormat};
use fct::train::augment::{augment, AugmentConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> fct::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "augment_out".into());
    let out = std::path::Path::new(&out);
    std::fs::create_dir_all(out)?;

    let ds = synth_dataset(1, 64, 4, 3)?;
    let sample = &ds.samples[0];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for i in 0..4 {
        let s = if i == 0 { sample.clone() } else { augment(sample, &AugmentConfig::default(), &mut rng) };
        write_image(&out.join(format!("image{i}.png")), &s.image, FileFormat::Png)?;
        write_mask(&out.join(format!("mask{i}.png")), &s.mask, 64, 64, FileFormat::Png)?;
        let fg = s.mask.iter().filter(|&&m| m > 0).count();
        println!("variant {i}: {fg} foreground pixels");
    }
    println!("wrote {}", out.display());
    Ok(())
}
