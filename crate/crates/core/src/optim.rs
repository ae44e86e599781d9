//! Rectified Adam.
//!
//! ```text
//! m_t = β1 m + (1 − β1) g          v_t = β2 v + (1 − β2) g²
//! ρ∞  = 2 / (1 − β2) − 1           ρ_t = ρ∞ − 2 t β2^t / (1 − β2^t)
//! ρ_t > 4:  θ −= lr · r_t · m̂ / (√v̂ + eps)
//!           r_t = √((ρ_t − 4)(ρ_t − 2) ρ∞ / ((ρ∞ − 4)(ρ∞ − 2) ρ_t))
//! else:     θ −= lr · m̂
//! ```
//!
//! Scalar factors are computed in `f64`. Element arithmetic is done in `f64`
//! and stored back in the state type.

use thiserror::Error;

use crate::halfprec::round_to_fp16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in parameter {param} at index {index}")]
    NonFinite { param: usize, index: usize },
    #[error("parameter {param}: {found} values, optimizer state holds {expected}")]
    Size { param: usize, expected: usize, found: usize },
}

/// Element type of parameters and optimizer state.
pub trait Element: Copy + Default {
    fn to_f64(self) -> f64;
    fn from_f64(x: f64) -> Self;
    fn is_finite(self) -> bool;
    fn to_half_precision(self) -> Self;
}

impl Element for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn to_half_precision(self) -> Self {
        round_to_fp16(self)
    }
}

impl Element for f64 {
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(x: f64) -> Self {
        x
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn to_half_precision(self) -> Self {
        round_to_fp16(self as f32) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RAdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for RAdamConfig {
    fn default() -> Self {
        RAdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl RAdamConfig {
    pub fn rho_inf(&self) -> f64 {
        2.0 / (1.0 - self.beta2) - 1.0
    }

    pub fn rho(&self, t: u64) -> f64 {
        let b2t = self.beta2.powi(t as i32);
        self.rho_inf() - 2.0 * t as f64 * b2t / (1.0 - b2t)
    }

    /// Rectification factor `r_t`, or `None` on the un-adapted branch.
    pub fn rectification(&self, t: u64) -> Option<f64> {
        let rho = self.rho(t);
        if rho <= 4.0 {
            return None;
        }
        let ri = self.rho_inf();
        Some(((rho - 4.0) * (rho - 2.0) * ri / ((ri - 4.0) * (ri - 2.0) * rho)).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RAdam<T: Element = f32> {
    config: RAdamConfig,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    half_state: bool,
}

impl<T: Element> RAdam<T> {
    /// Zeroed state for parameters of the given sizes.
    pub fn new(config: RAdamConfig, sizes: &[usize]) -> Self {
        RAdam {
            config,
            t: 0,
            m: sizes.iter().map(|&n| vec![T::default(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::default(); n]).collect(),
            half_state: false,
        }
    }

    /// Round moments, parameters and `eps` through FP16 after each update.
    pub fn with_half_state(mut self, on: bool) -> Self {
        self.half_state = on;
        self
    }

    pub fn config(&self) -> &RAdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    /// One update. Fails without touching any state when a gradient is
    /// non-finite or sizes disagree.
    pub fn step<P, G>(&mut self, params: &mut [P], grads: &[G]) -> Result<(), OptimError>
    where
        P: AsMut<[T]>,
        G: AsRef<[T]>,
    {
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (p, g) = (p.as_mut(), g.as_ref());
            let expected = self.m.get(i).map_or(0, Vec::len);
            for found in [p.len(), g.len()] {
                if found != expected {
                    return Err(OptimError::Size { param: i, expected, found });
                }
            }
            if let Some(index) = g.iter().position(|x| !x.is_finite()) {
                return Err(OptimError::NonFinite { param: i, index });
            }
        }
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(OptimError::Size {
                param: params.len().min(grads.len()),
                expected: self.m.len(),
                found: params.len().min(grads.len()),
            });
        }

        self.t += 1;
        let c = self.config;
        let t = self.t;
        let bc1 = 1.0 - c.beta1.powi(t as i32);
        let bc2 = 1.0 - c.beta2.powi(t as i32);
        let rect = c.rectification(t);
        let q = |x: f64| -> T {
            let v = T::from_f64(x);
            if self.half_state {
                v.to_half_precision()
            } else {
                v
            }
        };
        let eps = q(c.eps).to_f64();
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((p, &g), m), v) in p.as_mut().iter_mut().zip(g.as_ref()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.to_f64();
                let mn = q(c.beta1 * m.to_f64() + (1.0 - c.beta1) * g);
                let vn = q(c.beta2 * v.to_f64() + (1.0 - c.beta2) * g * g);
                *m = mn;
                *v = vn;
                let m_hat = mn.to_f64() / bc1;
                let update = match rect {
                    Some(r) => {
                        let v_hat = (vn.to_f64() / bc2).sqrt();
                        c.lr * r * m_hat / (v_hat + eps)
                    }
                    None => c.lr * m_hat,
                };
                *p = q(p.to_f64() - update);
            }
        }
        Ok(())
    }
}
