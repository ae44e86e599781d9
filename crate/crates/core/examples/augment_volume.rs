//! Elastic deformation and Gaussian noise on a synthetic pair.
//!
//! Usage: `cargo run --example augment_volume [seed]`

use voxseg::augment::{augment_pair, make_deform_field, DeformParams, NoiseParams};
use voxseg::train::toy_sample;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed: u64 = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed"));
    let sample = toy_sample(32);
    let deform = DeformParams::default();
    let noise = NoiseParams::default();

    let field = make_deform_field(sample.image.dims(), &deform, seed)?;
    println!("field max |displacement| {:.3} voxels", field.max_abs());

    let (x, y) = augment_pair(&sample.image, &sample.labels, Some(&deform), Some(&noise), seed)?;
    let changed = y.data().iter().zip(sample.labels.data()).filter(|(a, b)| a != b).count();
    println!("labels changed at {changed} of {} voxels", y.len());
    for c in 0..sample.labels.num_classes() as u32 {
        let before = sample.labels.data().iter().filter(|&&l| l == c).count();
        let after = y.data().iter().filter(|&&l| l == c).count();
        println!("  class {c}: {before} -> {after}");
    }
    let diff: f64 = x.data().iter().zip(sample.image.data()).map(|(a, b)| (a - b).abs() as f64).sum();
    println!("mean |intensity change| {:.4}", diff / x.len() as f64);
    Ok(())
}
