//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Pass a number or a name fragment to run a
//! subset.

mod common;

use std::collections::BTreeSet;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;
use voxseg::augment::{
    augment_pair, elastic_deform, gaussian_noise, make_deform_field, DeformField, DeformParams, NoiseParams,
    OutOfBounds, SigmaUnits,
};
use voxseg::halfprec::{decode_fp16, encode_fp16, Half, PrecisionLevel};
use voxseg::losses::{combined_loss, cross_entropy, dice_loss, LossConfig};
use voxseg::metrics::{evaluate, hausdorff_points};
use voxseg::network::{encode_checkpoint, Network, NetworkConfig};
use voxseg::tensor::{Tape, Tensor};
use voxseg::train::{infer, toy_config, toy_sample, train_on, TrainConfig, TrainError, TrainOutcome};
use voxseg::volio::{LabelVolume, Volume};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn parameter_counts() -> Outcome {
    let mut parts = Vec::new();
    for (name, cfg, target) in [
        ("default", NetworkConfig::default(), 2.4e6),
        ("small", NetworkConfig::small(), 1.4e6),
        ("large", NetworkConfig::large(), 5.1e6),
    ] {
        let n = Network::build(&cfg, 0).map_err(|e| e.to_string())?.count_parameters();
        let rel = (n as f64 - target).abs() / target;
        parts.push(format!("{name} {n} ({:+.1}%)", 100.0 * (n as f64 - target) / target));
        ensure(rel <= 0.15, || format!("{name}: {n} params, target {target}"))?;
    }
    Ok(parts.join(", "))
}

fn shape_fidelity() -> Outcome {
    let full = [181, 217, 181];
    let half = [91, 109, 91];

    // Full-width shape law, analytically.
    let net = Network::build(&NetworkConfig::default(), 0).map_err(|e| e.to_string())?;
    let listing = net.listing(full).map_err(|e| e.to_string())?;
    let stem = &listing.rows[0];
    ensure(stem.dims == vec![half], || format!("stem dims {:?}", stem.dims))?;
    let head = listing.rows.last().unwrap();
    ensure(head.dims == vec![full] && head.channels == vec![55], || {
        format!("head dims {:?} channels {:?}", head.dims, head.channels)
    })?;

    // Executed forward at reduced widths.
    let net = Network::build(&NetworkConfig::tiny([2, 4, 8], 55), 0).map_err(|e| e.to_string())?;
    let tape = Tape::default();
    let params = net.bind(&tape, false);
    let x = tape.constant(Tensor::zeros([1, 1, full[0], full[1], full[2]]));
    let mut stem_shape = None;
    let p = net
        .forward_traced(&tape, &params, &x, &mut |layer, shapes| {
            if layer == "stem" {
                stem_shape = Some(shapes[0]);
            }
        })
        .map_err(|e| e.to_string())?;
    let out = p.shape();
    drop(p);
    ensure(out == [1, 55, 181, 217, 181], || format!("output {out:?}"))?;
    let s = stem_shape.ok_or("no stem trace")?;
    ensure(s[2..] == half, || format!("stem {s:?}"))?;

    // Random extents in [8, 40].
    let net = Network::build(&NetworkConfig::tiny([2, 4, 8], 3), 1).map_err(|e| e.to_string())?;
    let mut r = common::rng(2);
    for _ in 0..50 {
        let dims: [usize; 3] = std::array::from_fn(|_| r.random_range(8..=40));
        let x = Tensor::zeros([1, 1, dims[0], dims[1], dims[2]]);
        let y = net.forward(&x).map_err(|e| e.to_string())?;
        ensure(y.shape() == [1, 3, dims[0], dims[1], dims[2]], || {
            format!("{dims:?} -> {:?}", y.shape())
        })?;
    }
    Ok(format!(
        "(1,1,181,217,181) -> {out:?} at widths 2/4/8, half-res {half:?}; listing at 16/32/64 agrees; 50 random dims ok"
    ))
}

fn fp16_codec() -> Outcome {
    let mut nan_patterns = 0;
    for bits in 0..=u16::MAX {
        let h = Half::from_bits(bits);
        let back = encode_fp16(decode_fp16(h));
        if h.is_nan() {
            nan_patterns += 1;
            ensure(back.is_nan(), || format!("{bits:#06x} lost NaN"))?;
        } else {
            ensure(back.to_bits() == bits, || format!("{bits:#06x} -> {:#06x}", back.to_bits()))?;
        }
    }
    let max = decode_fp16(Half::MAX);
    let min = decode_fp16(Half::MIN_POSITIVE);
    ensure(max == 65504.0 && encode_fp16(65504.0) == Half::MAX, || format!("max {max}"))?;
    ensure(min == 2f32.powi(-14) && format!("{min:.3e}") == "6.104e-5", || format!("min normal {min:e}"))?;
    ensure(encode_fp16(min) == Half::MIN_POSITIVE, || "min normal re-encode".into())?;
    ensure(encode_fp16(65520.0) == Half::INFINITY, || "65520 must overflow".into())?;
    Ok(format!(
        "65536 patterns round-trip ({nan_patterns} NaN canonicalized); max {max}, min normal {min:.3e}"
    ))
}

fn gradient_suite() -> Outcome {
    let mut worst = (0.0f64, "");
    let mut fails = Vec::new();
    for (name, r) in common::gradient_suite() {
        let tol = if name == "end-to-end network" { 2e-2 } else { 1e-2 };
        if r.max_rel_error >= tol {
            fails.push(format!("{name} {:.2e}", r.max_rel_error));
        }
        if r.max_rel_error > worst.0 {
            worst = (r.max_rel_error, name);
        }
    }
    ensure(fails.is_empty(), || fails.join(", "))?;
    Ok(format!("worst {:.2e} ({})", worst.0, worst.1))
}

fn conv_oracle() -> Outcome {
    let bad = common::conv_oracle_mismatches(200, 2024);
    ensure(bad == 0, || format!("{bad} of 200 cases differ"))?;
    Ok("200 random cases bitwise equal".into())
}

fn loss_values() -> Outcome {
    let shape = [1, 55, 3, 4, 2];
    let p = Tensor::full(shape, 1.0 / 55.0);
    let y = Tensor::from_fn(shape, |[_, c, d, h, w]| (c == (d * 8 + h * 2 + w) % 55) as u8 as f32);
    let cfg = LossConfig::default();
    let tape = Tape::default();
    let pv = tape.constant(p);
    let ce = cross_entropy(&tape, &pv, &y, &cfg).map_err(|e| e.to_string())?.value().data()[0];
    let ln55 = 55f64.ln();
    ensure((ce as f64 - ln55).abs() <= 1e-6, || format!("CE {ce} vs ln 55 {ln55}"))?;

    let perfect = tape.constant(y.clone());
    let dice = dice_loss(&tape, &perfect, &y, 1e-4).map_err(|e| e.to_string())?.value().data()[0];
    ensure(dice.abs() < 1e-6, || format!("dice of perfect prediction {dice}"))?;

    let mut r = common::rng(6);
    let q = {
        let logits = common::random_tensor(&mut r, shape, -2.0, 2.0);
        tape.softmax_channels(&tape.constant(logits))
    };
    let a = cross_entropy(&tape, &q, &y, &cfg).map_err(|e| e.to_string())?.value().data()[0];
    let b = dice_loss(&tape, &q, &y, cfg.dice_epsilon).map_err(|e| e.to_string())?.value().data()[0];
    let c = combined_loss(&tape, &q, &y, &cfg).map_err(|e| e.to_string())?.value().data()[0];
    ensure(c.to_bits() == (a + b).to_bits(), || format!("combined {c} vs {a} + {b}"))?;
    Ok(format!("CE {ce:.9} (ln 55 = {ln55:.9}); dice(perfect) {dice:e}; combined bitwise CE + dice"))
}

fn metrics_oracle() -> Outcome {
    let mut r = common::rng(7);
    for case in 0..100 {
        let dims: [usize; 3] = std::array::from_fn(|_| r.random_range(1..=8));
        let classes = r.random_range(2..=4u32);
        let n: usize = dims.iter().product();
        let mut draw = || (0..n).map(|_| r.random_range(0..classes)).collect::<Vec<u32>>();
        let g = LabelVolume::new(dims, [1.0; 3], classes as usize, draw()).unwrap();
        let p = LabelVolume::new(dims, [1.0; 3], classes as usize, draw()).unwrap();
        let report = evaluate(&g, &p, classes as usize).map_err(|e| e.to_string())?;
        for m in &report.per_class {
            let (d, h) = common::brute_force_class(&g, &p, m.class_id);
            ensure(m.dsc == d && m.hd == h, || {
                format!("case {case} class {}: ({}, {}) vs oracle ({d}, {h})", m.class_id, m.dsc, m.hd)
            })?;
        }
    }
    let hd = hausdorff_points(&[[0, 0, 0]], &[[3, 4, 0]]);
    ensure(hd == 5.0, || format!("3-4-5 case gave {hd}"))?;

    let truth = LabelVolume::new([3, 1, 1], [1.0; 3], 3, vec![0, 1, 2]).unwrap();
    let pred = LabelVolume::new([3, 1, 1], [1.0; 3], 3, vec![0, 1, 1]).unwrap();
    let report = evaluate(&truth, &pred, 3).map_err(|e| e.to_string())?;
    let missing = &report.per_class[1];
    ensure(
        missing.hd.is_infinite() && missing.absent_in_pred && report.missing_classes == 1 && report.mean_hd.is_finite(),
        || format!("{report:?}"),
    )?;
    Ok("100 random volumes match brute force; HD 3-4-5 = 5; missing class HD inf flagged".into())
}

fn self_dsc(out: &TrainOutcome, sample: &voxseg::train::Sample) -> Result<f64, String> {
    let (pred, _) = infer(&out.network, &sample.image).map_err(|e| e.to_string())?;
    Ok(evaluate(&sample.labels, &pred, 4).map_err(|e| e.to_string())?.mean_dsc)
}

fn toy_overfit() -> Outcome {
    let sample = toy_sample(24);
    let samples = std::slice::from_ref(&sample);
    let full = train_on(&toy_config(PrecisionLevel::Full, 2000, 1), samples, &[]).map_err(|e| e.to_string())?;
    let dsc = self_dsc(&full, &sample)?;
    ensure(dsc > 95.0, || format!("FULL self-DSC {dsc:.2}"))?;

    let windows: Vec<f64> = full
        .log
        .chunks(200)
        .map(|c| c.iter().map(|r| r.loss as f64).sum::<f64>() / c.len() as f64)
        .collect();
    ensure(windows.windows(2).all(|w| w[1] <= w[0]), || format!("200-step window means rose: {windows:?}"))?;

    let mixed = train_on(&toy_config(PrecisionLevel::MixedSafe, 2000, 1), samples, &[]).map_err(|e| e.to_string())?;
    let (lf, lm) = (full.tail_loss(100), mixed.tail_loss(100));
    let rel = ((lm - lf) / lf).abs();
    ensure(rel <= 0.05, || format!("MIXED_SAFE final loss {lm} vs FULL {lf}"))?;

    let mut half = toy_config(PrecisionLevel::Half, 2000, 1);
    half.optimizer.lr = 0.1;
    let report = match train_on(&half, samples, &[]) {
        Err(TrainError::Diverged(report)) => report,
        Ok(out) => return Err(format!("HALF did not diverge (tail loss {})", out.tail_loss(100))),
        Err(e) => return Err(e.to_string()),
    };
    Ok(format!(
        "FULL self-DSC {dsc:.2}; final loss FULL {lf:.5} MIXED_SAFE {lm:.5} ({:.2}%); HALF lr 0.1 diverged at step {}",
        100.0 * rel,
        report.step
    ))
}

fn scaling_neutrality() -> Outcome {
    let sample = toy_sample(24);
    let mut images = Vec::new();
    for exp in [0, 8, 16] {
        let cfg = TrainConfig {
            initial_scale: 2f32.powi(exp),
            ..toy_config(PrecisionLevel::Full, 50, 4)
        };
        let out = train_on(&cfg, std::slice::from_ref(&sample), &[]).map_err(|e| e.to_string())?;
        ensure(out.skipped_steps == 0, || format!("scale 2^{exp} skipped {} steps", out.skipped_steps))?;
        images.push(encode_checkpoint(&out.network));
    }
    ensure(images[0] == images[1] && images[0] == images[2], || "checkpoints differ".into())?;
    Ok(format!("scales 1, 2^8, 2^16: {} checkpoint bytes identical", images[0].len()))
}

fn determinism() -> Outcome {
    let sample = toy_sample(16);
    let run = || -> Result<(Vec<Vec<u8>>, Vec<u8>), String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let cfg = TrainConfig {
            deform: Some(DeformParams::default()),
            noise: Some(NoiseParams::default()),
            checkpoint_every: 5,
            out_dir: Some(dir.path().to_path_buf()),
            ..toy_config(PrecisionLevel::MixedSafe, 12, 9)
        };
        let out = train_on(&cfg, std::slice::from_ref(&sample), &[]).map_err(|e| e.to_string())?;
        let ckpts = out.checkpoints.iter().map(|p| std::fs::read(p).unwrap()).collect();
        let log = std::fs::read(dir.path().join("train.log")).map_err(|e| e.to_string())?;
        Ok((ckpts, log))
    };
    let (a, b) = (run()?, run()?);
    ensure(a.0.len() == 4, || format!("{} checkpoints", a.0.len()))?;
    ensure(a == b, || "runs differ".into())?;

    let d = DeformParams::default();
    let n = NoiseParams::default();
    let bits = |v: &Volume| v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let x = augment_pair(&sample.image, &sample.labels, Some(&d), Some(&n), 5).map_err(|e| e.to_string())?;
    let y = augment_pair(&sample.image, &sample.labels, Some(&d), Some(&n), 5).map_err(|e| e.to_string())?;
    let z = augment_pair(&sample.image, &sample.labels, Some(&d), Some(&n), 6).map_err(|e| e.to_string())?;
    ensure(bits(&x.0) == bits(&y.0) && x.1 == y.1, || "augmentation differs under one seed".into())?;
    ensure(bits(&x.0) != bits(&z.0), || "augmentation ignores the seed".into())?;
    Ok("checkpoints, logs and augmented volumes bitwise identical per seed".into())
}

fn augmentation_invariants() -> Outcome {
    let dims = [7, 8, 9];
    let [_, wn, dn] = dims;
    let x = Volume::from_fn(dims, [1.0; 3], |h, w, d| ((h * wn + w) * dn + d + 1) as f32).unwrap();
    let y = LabelVolume::from_fn(dims, [1.0; 3], 6, |h, w, d| ((h + 2 * w + d) % 4 + 1) as u32).unwrap();

    let (xo, yo) = elastic_deform(&x, &y, &DeformField::zeros(dims), OutOfBounds::Background).unwrap();
    ensure(xo == x && yo == y, || "zero field changed the volume".into())?;

    for axis in 0..3 {
        let mut delta = [0.0f32; 3];
        delta[axis] = 1.0;
        let (xo, yo) = elastic_deform(&x, &y, &DeformField::constant(dims, delta), OutOfBounds::Background).unwrap();
        for h in 0..dims[0] {
            for w in 0..dims[1] {
                for d in 0..dims[2] {
                    let mut src = [h, w, d];
                    src[axis] += 1;
                    let (ex, ey) = if src[axis] < dims[axis] {
                        (x.get(src[0], src[1], src[2]), y.get(src[0], src[1], src[2]))
                    } else {
                        (0.0, 0)
                    };
                    ensure(xo.get(h, w, d) == ex && yo.get(h, w, d) == ey, || {
                        format!("+1 shift on axis {axis} wrong at {:?}", [h, w, d])
                    })?;
                }
            }
        }
    }

    let allowed: BTreeSet<u32> = y.data().iter().copied().chain([0]).collect();
    for seed in 0..40 {
        let params = DeformParams {
            sigma_units: SigmaUnits::Voxels,
            sigma_low: 1.0,
            sigma_high: 2.0,
            alpha: 4.0 + seed as f64 / 4.0,
            ..DeformParams::default()
        };
        let field = make_deform_field(dims, &params, seed).unwrap();
        let (_, yo) = elastic_deform(&x, &y, &field, params.out_of_bounds).unwrap();
        ensure(yo.data().iter().all(|l| allowed.contains(l)), || format!("seed {seed} grew the label set"))?;
    }

    let base = Volume::from_fn([16; 3], [1.0; 3], |h, w, d| ((h + w + d) % 7) as f32).unwrap();
    let mut worst = 0.0f64;
    for sigma in [0.01, 0.05, 0.1] {
        for seed in 0..5 {
            let noisy = gaussian_noise(&base, &NoiseParams::fixed(sigma), seed).unwrap();
            let diffs: Vec<f64> = noisy.data().iter().zip(base.data()).map(|(a, b)| (*a - *b) as f64).collect();
            let n = diffs.len() as f64;
            let mean = diffs.iter().sum::<f64>() / n;
            let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            let rel = (sd - sigma).abs() / sigma;
            worst = worst.max(rel);
            ensure(rel <= 0.15, || format!("sigma {sigma} seed {seed}: measured {sd}"))?;
        }
    }
    Ok(format!(
        "zero field identity; +1 shifts exact on 3 axes; label sets closed over 40 fields; noise sigma within {:.1}%",
        100.0 * worst
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("parameter counts", parameter_counts),
        ("shape fidelity", shape_fidelity),
        ("fp16 codec", fp16_codec),
        ("gradient suite", gradient_suite),
        ("conv oracle", conv_oracle),
        ("loss values", loss_values),
        ("metrics oracle", metrics_oracle),
        ("toy overfit", toy_overfit),
        ("loss-scaling neutrality", scaling_neutrality),
        ("determinism", determinism),
        ("augmentation invariants", augmentation_invariants),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filters.is_empty() && !filters.iter().any(|s| *s == id || name.contains(s.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {id:>2} {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id:>2} {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
