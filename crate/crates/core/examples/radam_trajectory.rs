//! RAdam on a quadratic bowl: the first steps use the unadapted momentum
//! update, then the variance rectification switches on.

use voxseg::optim::{RAdam, RAdamConfig};

fn main() {
    let cfg = RAdamConfig { lr: 0.05, ..RAdamConfig::default() };
    let target = [3.0f32, -2.0, 0.5];
    let mut theta = vec![vec![0.0f32; 3]];
    let mut opt = RAdam::<f32>::new(cfg, &[3]);
    for t in 1..=300u64 {
        let g: Vec<f32> = theta[0].iter().zip(target).map(|(p, c)| 2.0 * (p - c)).collect();
        opt.step(&mut theta, &[g]).expect("finite gradients");
        if t <= 6 || t % 50 == 0 {
            let loss: f32 = theta[0].iter().zip(target).map(|(p, c)| (p - c).powi(2)).sum();
            let mode = cfg.rectification(t).map_or("momentum".to_string(), |r| format!("rect {r:.4}"));
            println!("step {t:>3} rho {:>7.3} {mode:<12} loss {loss:.6} theta {:?}", cfg.rho(t), theta[0]);
        }
    }
}
