//! Per-class Dice and Hausdorff distance, plus a paired t-test across cases.

use voxseg::metrics::{evaluate, paired_t_test};
use voxseg::volio::LabelVolume;

fn sphere(dims: [usize; 3], r: f64, shift: f64) -> LabelVolume {
    let c = dims.map(|e| e as f64 / 2.0);
    LabelVolume::from_fn(dims, [1.0; 3], 3, |h, w, d| {
        let dist = ((h as f64 - c[0] - shift).powi(2) + (w as f64 - c[1]).powi(2) + (d as f64 - c[2]).powi(2)).sqrt();
        if dist < r * 0.5 {
            2
        } else if dist < r {
            1
        } else {
            0
        }
    })
    .expect("labels")
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dims = [24, 24, 24];
    let truth = sphere(dims, 9.0, 0.0);
    let mut a = Vec::new();
    let mut b = Vec::new();
    for shift in [0.0, 0.5, 1.0, 1.5, 2.0] {
        let good = evaluate(&truth, &sphere(dims, 9.0, shift), 3)?;
        let worse = evaluate(&truth, &sphere(dims, 8.0, shift + 1.0), 3)?;
        println!("shift {shift}: {good}");
        a.push(good.mean_dsc);
        b.push(worse.mean_dsc);
    }
    let t = paired_t_test(&a, &b)?;
    println!("paired t-test on mean DSC: {t:?}");

    let empty = LabelVolume::from_fn(dims, [1.0; 3], 3, |_, _, _| 0)?;
    let report = evaluate(&truth, &empty, 3)?;
    println!("empty prediction: {} classes with infinite HD", report.missing_classes);
    Ok(())
}
