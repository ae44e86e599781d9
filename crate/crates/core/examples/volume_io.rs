//! Write an intensity/label pair, read it back, normalize, and one-hot encode.
//!
//! Usage: `cargo run --example volume_io [out_dir]`

use voxseg::volio::{load_intensity, load_labels, one_hot, save_volume, zscore_normalize, LabelVolume, Volume};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args().nth(1).map_or_else(std::env::temp_dir, Into::into);
    let dims = [12, 14, 10];
    let image = Volume::from_fn(dims, [1.0, 1.0, 1.2], |h, w, d| (h * 3 + w * 2 + d) as f32)?;
    let labels = LabelVolume::from_fn(dims, [1.0, 1.0, 1.2], 3, |h, w, _| ((h / 4 + w / 5) % 3) as u32)?;

    let (xp, yp) = (dir.join("example_image.vvol"), dir.join("example_labels.vvol"));
    save_volume(&image, &xp)?;
    save_volume(&labels, &yp)?;
    let image2 = load_intensity(&xp)?;
    let labels2 = load_labels(&yp)?;
    assert_eq!(image2, image);
    assert_eq!(labels2, labels);
    println!("round trip ok: {} and {}", xp.display(), yp.display());

    let z = zscore_normalize(&image2)?;
    let n = z.len() as f64;
    let mean = z.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = z.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    println!("z-scored: mean {mean:.2e}, std {:.6}", var.sqrt());

    let y = one_hot(&labels2);
    println!("one-hot tensor shape {:?}", y.shape());
    for c in 0..y.channels() {
        let count = y.instance(0, c).iter().filter(|&&v| v == 1.0).count();
        println!("  class {c}: {count} voxels");
    }
    Ok(())
}
