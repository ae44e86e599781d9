use std::time::Instant;

use voxseg::halfprec::PrecisionLevel;
use voxseg::metrics::evaluate;
use voxseg::train::{infer, toy_config, toy_sample, train_on, TrainError};

fn main() {
    let mut args = std::env::args().skip(1);
    let precision: PrecisionLevel = args.next().as_deref().unwrap_or("o0").parse().expect("precision");
    let steps: usize = args.next().map_or(2000, |s| s.parse().expect("steps"));
    let lr: Option<f64> = args.next().map(|s| s.parse().expect("lr"));

    let sample = toy_sample(24);
    let mut cfg = toy_config(precision, steps, 1);
    if let Some(lr) = lr {
        cfg.optimizer.lr = lr;
    }
    let t0 = Instant::now();
    match train_on(&cfg, std::slice::from_ref(&sample), &[]) {
        Ok(out) => {
            for r in out.log.iter().filter(|r| r.step % 100 == 0 || r.step <= 5) {
                println!("{r}");
            }
            let (pred, _) = infer(&out.network, &sample.image).expect("inference");
            let report = evaluate(&sample.labels, &pred, 4).expect("evaluate");
            println!(
                "precision {precision} steps {} skipped {} tail_loss {:.6} self_dsc {:.3} in {:.1?}",
                out.steps_run,
                out.skipped_steps,
                out.tail_loss(100),
                report.mean_dsc,
                t0.elapsed()
            );
        }
        Err(TrainError::Diverged(report)) => println!("diverged: {report} in {:.1?}", t0.elapsed()),
        Err(e) => eprintln!("error: {e}"),
    }
}
