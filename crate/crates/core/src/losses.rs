//! Segmentation objectives over probability maps and one-hot targets.
//!
//! All three take class probabilities `p` of shape `(N, L, D, H, W)` and a
//! one-hot target of the same shape, and reduce to a scalar on the tape.
//! Sums are accumulated in `f64` and rounded once.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::halfprec::{round_to_fp16, OpClass};
use crate::tensor::{Backward, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("loss shape mismatch: prediction {pred:?}, target {target:?}")]
    Shape { pred: [usize; 5], target: [usize; 5] },
    #[error("invalid loss config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    #[default]
    CrossEntropy,
    Dice,
    Combined,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "ce",
            LossKind::Dice => "dice",
            LossKind::Combined => "combined",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ce" | "cross_entropy" => Ok(LossKind::CrossEntropy),
            "dice" => Ok(LossKind::Dice),
            "combined" | "comb" => Ok(LossKind::Combined),
            other => Err(LossError::Config(format!("unknown loss `{other}` (expected ce, dice or combined)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub dice_epsilon: f32,
    /// Lower clamp on probabilities inside the logarithm.
    pub log_floor: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::CrossEntropy,
            dice_epsilon: 1e-4,
            log_floor: 1e-12,
        }
    }
}

impl LossConfig {
    pub fn with_kind(kind: LossKind) -> Self {
        LossConfig {
            kind,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.dice_epsilon > 0.0 && self.dice_epsilon.is_finite()) {
            return Err(LossError::Config(format!("dice_epsilon {} must be > 0", self.dice_epsilon)));
        }
        if !(self.log_floor > 0.0 && self.log_floor.is_finite()) {
            return Err(LossError::Config(format!("log_floor {} must be > 0", self.log_floor)));
        }
        Ok(())
    }
}

fn check(p: &Tensor, y: &Tensor) -> Result<(), LossError> {
    if p.shape() != y.shape() {
        return Err(LossError::Shape {
            pred: p.shape(),
            target: y.shape(),
        });
    }
    Ok(())
}

struct CrossEntropyBackward {
    p: std::rc::Rc<Tensor>,
    y: Tensor,
    floor: f32,
    norm: f32,
}

impl Backward for CrossEntropyBackward {
    fn backward(&self, grad: &[f32], _needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let g = grad[0];
        let out = self
            .p
            .data()
            .iter()
            .zip(self.y.data())
            .map(|(&p, &y)| {
                if y == 0.0 || p < self.floor {
                    0.0
                } else {
                    -g * y / (p * self.norm)
                }
            })
            .collect();
        vec![Some(out)]
    }
}

/// Mean voxel-wise cross entropy, `-(1/|N·Ω|) Σ y log(max(p, floor))`.
///
/// When loss outputs are FP16-rounded the floor is rounded too.
pub fn cross_entropy(tape: &Tape, p: &Var, y: &Tensor, cfg: &LossConfig) -> Result<Var, LossError> {
    check(p.value(), y)?;
    let floor = if tape.rounds(OpClass::Loss) {
        round_to_fp16(cfg.log_floor)
    } else {
        cfg.log_floor
    };
    let norm = (p.value().batch() * p.value().spatial_len()) as f32;
    let mut acc = 0.0f64;
    for (&pv, &yv) in p.value().data().iter().zip(y.data()) {
        if yv != 0.0 {
            acc -= yv as f64 * (pv.max(floor) as f64).ln();
        }
    }
    let value = Tensor::scalar((acc / norm as f64) as f32);
    let op = CrossEntropyBackward {
        p: p.shared(),
        y: y.clone(),
        floor,
        norm,
    };
    Ok(tape.record(value, &[p], OpClass::Loss, op))
}

struct DiceBackward {
    y: Tensor,
    /// Per (n, l): `(eps + 2I, eps + S)`.
    parts: Vec<(f64, f64)>,
    weight: f64,
}

impl Backward for DiceBackward {
    fn backward(&self, grad: &[f32], _needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let g = grad[0] as f64;
        let vox = self.y.spatial_len();
        let mut out = vec![0.0f32; self.y.numel()];
        for (k, &(num, den)) in self.parts.iter().enumerate() {
            let ys = &self.y.data()[k * vox..(k + 1) * vox];
            let o = &mut out[k * vox..(k + 1) * vox];
            let inv = 1.0 / (den * den);
            for (o, &y) in o.iter_mut().zip(ys) {
                let dterm = (2.0 * y as f64 * den - num) * inv;
                *o = (-g * self.weight * dterm) as f32;
            }
        }
        vec![Some(out)]
    }
}

fn dice_parts(p: &Tensor, y: &Tensor, eps: f32) -> Vec<(f64, f64)> {
    let [n, l, ..] = p.shape();
    let eps = eps as f64;
    let mut parts = Vec::with_capacity(n * l);
    for b in 0..n {
        for c in 0..l {
            let (mut inter, mut total) = (0.0f64, 0.0f64);
            for (&pv, &yv) in p.instance(b, c).iter().zip(y.instance(b, c)) {
                inter += pv as f64 * yv as f64;
                total += pv as f64 + yv as f64;
            }
            parts.push((eps + 2.0 * inter, eps + total));
        }
    }
    parts
}

/// Soft dice, `1 - mean_l (eps + 2 Σ y p) / (eps + Σ (y + p))`, computed per
/// volume and averaged over the batch.
pub fn dice_loss(tape: &Tape, p: &Var, y: &Tensor, eps: f32) -> Result<Var, LossError> {
    check(p.value(), y)?;
    if !(eps > 0.0) {
        return Err(LossError::Config(format!("dice_epsilon {eps} must be > 0")));
    }
    let parts = dice_parts(p.value(), y, eps);
    let weight = 1.0 / parts.len() as f64;
    let mean: f64 = parts.iter().map(|(a, b)| a / b).sum::<f64>() * weight;
    let value = Tensor::scalar((1.0 - mean) as f32);
    let op = DiceBackward {
        y: y.clone(),
        parts,
        weight,
    };
    Ok(tape.record(value, &[p], OpClass::Loss, op))
}

/// Unweighted sum of cross entropy and dice.
pub fn combined_loss(tape: &Tape, p: &Var, y: &Tensor, cfg: &LossConfig) -> Result<Var, LossError> {
    let ce = cross_entropy(tape, p, y, cfg)?;
    let dice = dice_loss(tape, p, y, cfg.dice_epsilon)?;
    tape.add(&ce, &dice).map_err(|_| LossError::Shape {
        pred: ce.shape(),
        target: dice.shape(),
    })
}

/// Dispatch on `cfg.kind`.
pub fn loss(tape: &Tape, p: &Var, y: &Tensor, cfg: &LossConfig) -> Result<Var, LossError> {
    cfg.validate()?;
    match cfg.kind {
        LossKind::CrossEntropy => cross_entropy(tape, p, y, cfg),
        LossKind::Dice => dice_loss(tape, p, y, cfg.dice_epsilon),
        LossKind::Combined => combined_loss(tape, p, y, cfg),
    }
}

/// Evaluate a loss without gradient tracking.
pub fn loss_value(p: &Tensor, y: &Tensor, cfg: &LossConfig) -> Result<f32, LossError> {
    let tape = Tape::default();
    let p = tape.constant(p.clone());
    Ok(loss(&tape, &p, y, cfg)?.value().data()[0])
}
