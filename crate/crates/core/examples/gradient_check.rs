//! Compare tape gradients of conv -> norm -> ReLU -> softmax -> loss with
//! central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxseg::losses::{combined_loss, LossConfig};
use voxseg::tensor::{Tape, Tensor, Var};

fn objective(tape: &Tape, x: &Var, w: &Var, y: &Tensor) -> Var {
    let c = w.shape()[0];
    let gamma = tape.constant(Tensor::full([1, c, 1, 1, 1], 1.0));
    let beta = tape.constant(Tensor::full([1, c, 1, 1, 1], 2.0));
    let h = tape.conv3d(x, w, None, 1, 1).unwrap();
    let h = tape.instance_norm(&h, &gamma, &beta, 1e-5).unwrap();
    let p = tape.softmax_channels(&tape.relu(&h));
    combined_loss(tape, &p, y, &LossConfig::default()).unwrap()
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut random = |shape| Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0));
    let x = random([1, 2, 5, 5, 5]);
    let w = random([3, 2, 3, 3, 3]);
    let y = Tensor::from_fn([1, 3, 5, 5, 5], |[_, c, d, h, w]| (c == (d + h + w) % 3) as u8 as f32);

    let tape = Tape::default();
    let wv = tape.leaf(w.clone().with_requires_grad(true));
    let loss = objective(&tape, &tape.constant(x.clone()), &wv, &y);
    tape.backward(&loss).unwrap();
    let grad = tape.grad_or_zeros(&wv);

    let eval = |w: Tensor| {
        let t = Tape::default();
        objective(&t, &t.constant(x.clone()), &t.constant(w), &y).value().data()[0] as f64
    };
    let h = 1e-2f32;
    let mut worst = 0.0f64;
    for j in (0..w.numel()).step_by(7) {
        let (mut plus, mut minus) = (w.clone(), w.clone());
        plus.data_mut()[j] += h;
        minus.data_mut()[j] -= h;
        let numeric = (eval(plus) - eval(minus)) / (2.0 * h as f64);
        let analytic = grad.data()[j] as f64;
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
        worst = worst.max(rel);
        println!("w[{j:>3}] analytic {analytic:>12.6} numeric {numeric:>12.6} rel {rel:.2e}");
    }
    println!("max relative error {worst:.2e}");
}
