#![allow(dead_code)]

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxseg::tensor::{Backward, Tape, Tensor, Var};
use voxseg::volio::LabelVolume;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 5], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Direct 3D cross-correlation. Each output sums `x·w` over input channels,
/// then kernel depth, height, width, skipping taps outside the input, and
/// adds the bias last.
pub fn naive_conv3d(x: &Tensor, w: &Tensor, bias: Option<&[f32]>, stride: usize, pad: usize) -> Tensor {
    let [n, ci_n, id, ih, iw] = x.shape();
    let [co_n, _, k, _, _] = w.shape();
    let out_extent = |e: usize| (e + 2 * pad - k) / stride + 1;
    let (od, oh, ow) = (out_extent(id), out_extent(ih), out_extent(iw));
    Tensor::from_fn([n, co_n, od, oh, ow], |[b, co, z, y, xx]| {
        let mut acc = 0.0f32;
        for ci in 0..ci_n {
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let sz = (z * stride + kd) as isize - pad as isize;
                        let sy = (y * stride + kh) as isize - pad as isize;
                        let sx = (xx * stride + kw) as isize - pad as isize;
                        if sz < 0 || sy < 0 || sx < 0 || sz >= id as isize || sy >= ih as isize || sx >= iw as isize {
                            continue;
                        }
                        acc += x.get([b, ci, sz as usize, sy as usize, sx as usize]) * w.get([co, ci, kd, kh, kw]);
                    }
                }
            }
        }
        if let Some(b) = bias {
            acc += b[co];
        }
        acc
    })
}

/// Per-class DSC and HD by explicit set construction and all-pairs search.
pub fn brute_force_class(truth: &LabelVolume, pred: &LabelVolume, class: u32) -> (f64, f64) {
    let [hn, wn, dn] = truth.dims();
    let mut g = HashSet::new();
    let mut p = HashSet::new();
    for h in 0..hn {
        for w in 0..wn {
            for d in 0..dn {
                if truth.get(h, w, d) == class {
                    g.insert((h as i64, w as i64, d as i64));
                }
                if pred.get(h, w, d) == class {
                    p.insert((h as i64, w as i64, d as i64));
                }
            }
        }
    }
    let inter = g.intersection(&p).count();
    let dsc = if g.is_empty() && p.is_empty() {
        100.0
    } else {
        200.0 * inter as f64 / (g.len() + p.len()) as f64
    };
    let dist = |a: &(i64, i64, i64), b: &(i64, i64, i64)| {
        (((a.0 - b.0).pow(2) + (a.1 - b.1).pow(2) + (a.2 - b.2).pow(2)) as f64).sqrt()
    };
    let directed = |a: &HashSet<(i64, i64, i64)>, b: &HashSet<(i64, i64, i64)>| {
        a.iter()
            .map(|x| b.iter().map(|y| dist(x, y)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    let hd = match (g.is_empty(), p.is_empty()) {
        (true, true) => 0.0,
        (true, false) | (false, true) => f64::INFINITY,
        _ => directed(&g, &p).max(directed(&p, &g)),
    };
    (dsc, hd)
}

/// Textbook rectified Adam on a scalar, written independently of the
/// library optimizer.
pub struct ReferenceRAdam {
    pub lr: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
    m: f64,
    v: f64,
    t: i32,
}

impl ReferenceRAdam {
    pub fn new(lr: f64) -> Self {
        ReferenceRAdam {
            lr,
            b1: 0.9,
            b2: 0.999,
            eps: 1e-8,
            m: 0.0,
            v: 0.0,
            t: 0,
        }
    }

    pub fn step(&mut self, theta: f64, g: f64) -> f64 {
        self.t += 1;
        self.m = self.b1 * self.m + (1.0 - self.b1) * g;
        self.v = self.b2 * self.v + (1.0 - self.b2) * g * g;
        let m_hat = self.m / (1.0 - self.b1.powi(self.t));
        let rho_inf = 2.0 / (1.0 - self.b2) - 1.0;
        let b2t = self.b2.powi(self.t);
        let rho_t = rho_inf - 2.0 * self.t as f64 * b2t / (1.0 - b2t);
        if rho_t > 4.0 {
            let v_hat = (self.v / (1.0 - b2t)).sqrt();
            let r = ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt();
            theta - self.lr * r * m_hat / (v_hat + self.eps)
        } else {
            theta - self.lr * m_hat
        }
    }
}

/// `Σ r ⊙ x` as a tape node.
struct DotBackward(Vec<f32>);

impl Backward for DotBackward {
    fn backward(&self, grad: &[f32], _needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        vec![Some(self.0.iter().map(|r| r * grad[0]).collect())]
    }
}

pub fn dot(tape: &Tape, x: &Var, r: &[f32]) -> Var {
    let v: f64 = x.value().data().iter().zip(r).map(|(a, b)| *a as f64 * *b as f64).sum();
    tape.record(Tensor::scalar(v as f32), &[x], voxseg::halfprec::OpClass::Loss, DotBackward(r.to_vec()))
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Relative error with a small absolute floor so that gradients that are
/// zero on both sides compare equal.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare tape gradients of `Σ r ⊙ f(inputs)` with central differences on
/// up to `max_per_input` coordinates of each input. `f` must be usable with
/// constant inputs as well.
pub fn grad_check(
    inputs: &[Tensor],
    f: &dyn Fn(&Tape, &[Var]) -> Var,
    h: f32,
    max_per_input: usize,
    seed: u64,
) -> GradCheck {
    let mut r = rng(seed);
    let tape = Tape::default();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_requires_grad(true))).collect();
    let out = f(&tape, &vars);
    let proj: Vec<f32> = (0..out.value().numel()).map(|_| r.random_range(-1.0f32..1.0)).collect();
    let obj = dot(&tape, &out, &proj);
    tape.backward(&obj).unwrap();
    let grads: Vec<Tensor> = vars.iter().map(|v| tape.grad_or_zeros(v)).collect();

    let eval = |ins: &[Tensor]| -> f64 {
        let t = Tape::default();
        let vs: Vec<Var> = ins.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&t, &vs);
        o.value().data().iter().zip(&proj).map(|(a, b)| *a as f64 * *b as f64).sum()
    };

    let mut worst = 0.0f64;
    let mut checked = 0;
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let idx: Vec<usize> = if n <= max_per_input {
            (0..n).collect()
        } else {
            (0..max_per_input).map(|_| r.random_range(0..n)).collect()
        };
        for j in idx {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let step = plus[i].data()[j] as f64 - minus[i].data()[j] as f64;
            let numeric = (eval(&plus) - eval(&minus)) / step;
            let analytic = grads[i].data()[j] as f64;
            worst = worst.max(rel_error(analytic, numeric, 1e-3));
            checked += 1;
        }
    }
    GradCheck {
        max_rel_error: worst,
        checked,
    }
}

/// Compare tape gradients of `Σ r ⊙ f(inputs)` with central differences
/// along one random unit direction per input, extrapolated from steps `h`
/// and `h / 2`. Errors are relative to the
/// larger side, floored at 1% of the largest directional derivative so that
/// gradients that vanish analytically are judged against the f32 noise of
/// the whole forward pass.
pub fn directional_check(inputs: &[Tensor], f: &dyn Fn(&Tape, &[Var]) -> Var, h: f64, seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let tape = Tape::default();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_requires_grad(true))).collect();
    let out = f(&tape, &vars);
    let proj: Vec<f32> = (0..out.value().numel()).map(|_| r.random_range(-1.0f32..1.0)).collect();
    let obj = dot(&tape, &out, &proj);
    tape.backward(&obj).unwrap();

    let eval = |ins: &[Tensor]| -> f64 {
        let t = Tape::default();
        let vs: Vec<Var> = ins.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&t, &vs);
        o.value().data().iter().zip(&proj).map(|(a, b)| *a as f64 * *b as f64).sum()
    };

    let mut pairs = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        let g = tape.grad_or_zeros(&vars[i]);
        let mut u: Vec<f64> = (0..input.numel()).map(|_| r.random_range(-1.0..1.0)).collect();
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        u.iter_mut().for_each(|x| *x /= norm);
        let analytic: f64 = g.data().iter().zip(&u).map(|(g, u)| *g as f64 * u).sum();
        let central = |h: f64| {
            let (mut plus, mut minus) = (inputs.to_vec(), inputs.to_vec());
            for (k, uk) in u.iter().enumerate() {
                plus[i].data_mut()[k] += (h * uk) as f32;
                minus[i].data_mut()[k] -= (h * uk) as f32;
            }
            (eval(&plus) - eval(&minus)) / (2.0 * h)
        };
        // Richardson extrapolation cancels the h² term.
        pairs.push((analytic, (4.0 * central(h / 2.0) - central(h)) / 3.0));
    }
    let floor = 1e-2 * pairs.iter().map(|p| p.0.abs()).fold(0.0, f64::max);
    GradCheck {
        max_rel_error: pairs.iter().map(|&(a, n)| rel_error(a, n, floor)).fold(0.0, f64::max),
        checked: pairs.len(),
    }
}

/// Finite-difference checks of every differentiable operation and of a tiny
/// end-to-end network. Returns `(name, result)` pairs.
pub fn gradient_suite() -> Vec<(&'static str, GradCheck)> {
    use voxseg::losses::{combined_loss, cross_entropy, dice_loss, LossConfig};
    use voxseg::network::{Network, NetworkConfig};

    let mut r = rng(11);
    let mut out = Vec::new();
    let h = 1e-2;

    let x = random_tensor(&mut r, [1, 2, 5, 4, 6], -1.0, 1.0);
    let w3 = random_tensor(&mut r, [3, 2, 3, 3, 3], -0.5, 0.5);
    let w1 = random_tensor(&mut r, [3, 2, 1, 1, 1], -0.5, 0.5);
    let b = random_tensor(&mut r, [3, 1, 1, 1, 1], -0.5, 0.5);
    out.push((
        "conv3d k3 s1 p1 + bias",
        grad_check(&[x.clone(), w3.clone(), b.clone()], &|t, v| t.conv3d(&v[0], &v[1], Some(&v[2]), 1, 1).unwrap(), h, 40, 1),
    ));
    out.push((
        "conv3d k3 s2 p1",
        grad_check(&[x.clone(), w3.clone()], &|t, v| t.conv3d(&v[0], &v[1], None, 2, 1).unwrap(), h, 40, 2),
    ));
    out.push((
        "conv3d k1 s1 p0",
        grad_check(&[x.clone(), w1], &|t, v| t.conv3d(&v[0], &v[1], None, 1, 0).unwrap(), h, 40, 3),
    ));

    let gamma = random_tensor(&mut r, [2, 1, 1, 1, 1], 0.5, 1.5);
    let beta = random_tensor(&mut r, [2, 1, 1, 1, 1], -0.5, 0.5);
    out.push((
        "instance_norm",
        grad_check(&[x.clone(), gamma, beta], &|t, v| t.instance_norm(&v[0], &v[1], &v[2], 1e-5).unwrap(), h, 40, 4),
    ));

    let away: Tensor = {
        let mut t = random_tensor(&mut r, [1, 2, 3, 3, 3], 0.1, 1.0);
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            if i % 2 == 0 {
                *v = -*v;
            }
        }
        t
    };
    out.push(("relu", grad_check(&[away], &|t, v| t.relu(&v[0]), h, 60, 5)));
    out.push(("softmax_channels", grad_check(&[x.clone()], &|t, v| t.softmax_channels(&v[0]), h, 60, 6)));
    out.push((
        "trilinear upsample",
        grad_check(&[x.clone()], &|t, v| t.trilinear_resize(&v[0], [9, 7, 11]).unwrap(), h, 60, 7),
    ));
    out.push((
        "trilinear downsample",
        grad_check(&[x.clone()], &|t, v| t.trilinear_resize(&v[0], [3, 3, 4]).unwrap(), h, 60, 8),
    ));
    let y2 = random_tensor(&mut r, [1, 3, 5, 4, 6], -1.0, 1.0);
    out.push((
        "concat_channels",
        grad_check(&[x.clone(), y2], &|t, v| t.concat_channels(&[&v[0], &v[1]]).unwrap(), h, 30, 9),
    ));
    let x2 = random_tensor(&mut r, [1, 2, 5, 4, 6], -1.0, 1.0);
    out.push(("add", grad_check(&[x.clone(), x2], &|t, v| t.add(&v[0], &v[1]).unwrap(), h, 30, 10)));
    out.push(("scale", grad_check(&[x.clone()], &|t, v| t.scale(&v[0], 0.75), h, 30, 11)));
    out.push(("sum", grad_check(&[x.clone()], &|t, v| t.sum(&v[0]), h, 30, 12)));

    let p = random_tensor(&mut r, [1, 3, 3, 4, 2], 0.1, 0.9);
    let y = Tensor::from_fn([1, 3, 3, 4, 2], |[_, c, d, hh, w]| ((d + hh + w) % 3 == c) as u8 as f32);
    let cfg = LossConfig::default();
    let (ya, yb, yc) = (y.clone(), y.clone(), y);
    out.push((
        "cross_entropy",
        grad_check(&[p.clone()], &move |t, v| cross_entropy(t, &v[0], &ya, &cfg).unwrap(), 1e-3, 72, 13),
    ));
    out.push((
        "dice_loss",
        grad_check(&[p.clone()], &move |t, v| dice_loss(t, &v[0], &yb, 1e-4).unwrap(), 1e-3, 72, 14),
    ));
    out.push((
        "combined_loss",
        grad_check(&[p], &move |t, v| combined_loss(t, &v[0], &yc, &cfg).unwrap(), 1e-3, 72, 15),
    ));

    // Affine parameters are shifted so that every rectifier input stays
    // well inside its linear region, and the classifier is shrunk so the
    // softmax does not saturate.
    let cfg = NetworkConfig::tiny([2, 4, 8], 3);
    let net = Network::build(&cfg, 5).unwrap();
    let mut inputs = vec![random_tensor(&mut r, [1, 1, 8, 8, 8], -1.0, 1.0)];
    for (prm, mut t) in net.params().iter().zip(net.param_tensors()) {
        let (centre, spread) = if prm.name.ends_with("norm.beta") {
            (8.0, 0.5)
        } else if prm.name.ends_with("norm.gamma") {
            (1.0, 0.2)
        } else if prm.name.ends_with(".bias") {
            (0.0, 0.5)
        } else {
            if prm.name == "head.conv2.weight" {
                t.data_mut().iter_mut().for_each(|v| *v *= 0.05);
            }
            inputs.push(t);
            continue;
        };
        t.data_mut().iter_mut().for_each(|v| *v = centre + r.random_range(-spread..spread));
        inputs.push(t);
    }
    out.push((
        "end-to-end network",
        directional_check(&inputs, &move |t, v| net.forward_on(t, &v[1..], &v[0]).unwrap(), 6e-2, 16),
    ));
    out
}

/// Run `cases` random convolutions against [`naive_conv3d`]; returns the
/// number that differ in any bit.
pub fn conv_oracle_mismatches(cases: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let k = [1, 3, 5][r.random_range(0..3)];
        let stride = r.random_range(1..=2);
        let pad = r.random_range(0..=k / 2);
        let ci = r.random_range(1..=3);
        let co = r.random_range(1..=3);
        let n = r.random_range(1..=2);
        let dims: Vec<usize> = (0..3).map(|_| r.random_range(k.max(2)..=7)).collect();
        let x = random_tensor(&mut r, [n, ci, dims[0], dims[1], dims[2]], -2.0, 2.0);
        let w = random_tensor(&mut r, [co, ci, k, k, k], -1.0, 1.0);
        let with_bias = r.random_bool(0.5);
        let bias: Vec<f32> = (0..co).map(|_| r.random_range(-1.0f32..1.0)).collect();
        let tape = Tape::default();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let bv = tape.constant(Tensor::from_vec([co, 1, 1, 1, 1], bias.clone()).unwrap());
        let got = tape.conv3d(&xv, &wv, with_bias.then_some(&bv), stride, pad).unwrap();
        let want = naive_conv3d(&x, &w, with_bias.then_some(bias.as_slice()), stride, pad);
        let same = got.shape() == want.shape()
            && got.value().data().iter().zip(want.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        bad += (!same) as usize;
    }
    bad
}
