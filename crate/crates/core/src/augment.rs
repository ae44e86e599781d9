//! Training-time augmentation: additive Gaussian noise and elastic
//! deformation with nearest-neighbour resampling.
//!
//! Everything here is a pure function of its inputs and a `u64` seed.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::volio::{LabelVolume, Volume, VolioError};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("dims mismatch: {0}")]
    Dims(String),
    #[error("invalid augmentation parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Volume(#[from] VolioError),
}

/// Draw `x` from `[low, high)`, or exactly `low` when the interval is empty.
fn draw_in(rng: &mut ChaCha8Rng, low: f64, high: f64) -> f64 {
    if high > low {
        rng.random_range(low..high)
    } else {
        low
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseParams {
    pub sigma_low: f64,
    pub sigma_high: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams {
            sigma_low: 0.0,
            sigma_high: 0.1,
        }
    }
}

impl NoiseParams {
    pub fn fixed(sigma: f64) -> Self {
        NoiseParams {
            sigma_low: sigma,
            sigma_high: sigma,
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(0.0 <= self.sigma_low && self.sigma_low <= self.sigma_high && self.sigma_high.is_finite()) {
            return Err(AugmentError::Params(format!(
                "noise sigma range ({}, {}) must satisfy 0 <= low <= high",
                self.sigma_low, self.sigma_high
            )));
        }
        Ok(())
    }
}

/// `x + G` with `G ~ N(0, σ²)` i.i.d., `σ` drawn once from the range.
pub fn gaussian_noise(x: &Volume, params: &NoiseParams, seed: u64) -> Result<Volume, AugmentError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = draw_in(&mut rng, params.sigma_low, params.sigma_high);
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| AugmentError::Params(e.to_string()))?;
    let data = x
        .data()
        .iter()
        .map(|&v| (v as f64 + normal.sample(&mut rng)) as f32)
        .collect();
    Ok(x.with_data(data)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SigmaUnits {
    /// Kernel σ is a fraction of each axis extent.
    #[default]
    Fraction,
    /// Kernel σ is given directly in voxels.
    Voxels,
}

impl FromStr for SigmaUnits {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "fraction" => Ok(SigmaUnits::Fraction),
            "voxels" => Ok(SigmaUnits::Voxels),
            other => Err(AugmentError::Params(format!("unknown sigma units `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutOfBounds {
    /// Intensity 0, label 0.
    #[default]
    Background,
    /// Sample the nearest in-bounds voxel.
    Clamp,
}

impl FromStr for OutOfBounds {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "background" => Ok(OutOfBounds::Background),
            "clamp" => Ok(OutOfBounds::Clamp),
            other => Err(AugmentError::Params(format!("unknown out-of-bounds policy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformParams {
    pub sigma_low: f64,
    pub sigma_high: f64,
    pub sigma_units: SigmaUnits,
    /// Displacement scale in voxels.
    pub alpha: f64,
    /// Kernel radius in multiples of σ.
    pub truncate: f64,
    pub out_of_bounds: OutOfBounds,
}

impl Default for DeformParams {
    fn default() -> Self {
        DeformParams {
            sigma_low: 0.04,
            sigma_high: 0.06,
            sigma_units: SigmaUnits::Fraction,
            alpha: 8.0,
            truncate: 3.0,
            out_of_bounds: OutOfBounds::Background,
        }
    }
}

impl DeformParams {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(self.sigma_low > 0.0 && self.sigma_low <= self.sigma_high && self.sigma_high.is_finite()) {
            return Err(AugmentError::Params(format!(
                "elastic sigma range ({}, {}) must satisfy 0 < low <= high",
                self.sigma_low, self.sigma_high
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(AugmentError::Params(format!("alpha {} must be >= 0", self.alpha)));
        }
        if !(self.truncate > 0.0 && self.truncate.is_finite()) {
            return Err(AugmentError::Params(format!("truncate {} must be > 0", self.truncate)));
        }
        Ok(())
    }
}

/// Per-voxel displacement `(ΔH, ΔW, ΔD)` in voxels, laid out like
/// [`Volume`] data.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformField {
    dims: [usize; 3],
    components: [Vec<f32>; 3],
}

impl DeformField {
    pub fn zeros(dims: [usize; 3]) -> Self {
        let n = dims.iter().product();
        DeformField {
            dims,
            components: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        }
    }

    pub fn constant(dims: [usize; 3], delta: [f32; 3]) -> Self {
        let n = dims.iter().product();
        DeformField {
            dims,
            components: delta.map(|v| vec![v; n]),
        }
    }

    pub fn from_components(dims: [usize; 3], components: [Vec<f32>; 3]) -> Result<Self, AugmentError> {
        let n: usize = dims.iter().product();
        if components.iter().any(|c| c.len() != n) {
            return Err(AugmentError::Dims(format!("field components must each hold {n} values")));
        }
        Ok(DeformField { dims, components })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// Component 0 = H, 1 = W, 2 = D.
    pub fn component(&self, axis: usize) -> &[f32] {
        &self.components[axis]
    }

    pub fn get(&self, h: usize, w: usize, d: usize) -> [f32; 3] {
        let i = (h * self.dims[1] + w) * self.dims[2] + d;
        [self.components[0][i], self.components[1][i], self.components[2][i]]
    }

    pub fn max_abs(&self) -> f32 {
        self.components
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.components.iter().all(|c| c.iter().all(|v| v.is_finite()))
    }
}

/// Unit-sum Gaussian kernel truncated at `truncate·σ`.
pub fn gaussian_kernel(sigma: f64, truncate: f64) -> Vec<f64> {
    let radius = (truncate * sigma).ceil().max(0.0) as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-0.5 * x * x / (sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Zero-padded 1-D convolution of `data` (layout `outer × n × inner`) along
/// its middle axis.
fn smooth_axis(data: &mut [f64], outer: usize, n: usize, inner: usize, kernel: &[f64]) {
    let radius = (kernel.len() / 2) as isize;
    let mut line = vec![0.0f64; n];
    for o in 0..outer {
        for i in 0..inner {
            let at = |t: usize| (o * n + t) * inner + i;
            for (t, slot) in line.iter_mut().enumerate() {
                *slot = data[at(t)];
            }
            for t in 0..n {
                let mut acc = 0.0;
                for (k, &w) in kernel.iter().enumerate() {
                    let s = t as isize + k as isize - radius;
                    if s >= 0 && (s as usize) < n {
                        acc += w * line[s as usize];
                    }
                }
                data[at(t)] = acc;
            }
        }
    }
}

/// Random smooth displacement field: `U(-1, 1)` per voxel and axis, smoothed
/// by a separable Gaussian along H, W, D, then scaled by `alpha`.
///
/// One kernel σ is drawn per call; in [`SigmaUnits::Fraction`] mode the
/// kernel along each axis uses σ times that axis extent.
pub fn make_deform_field(dims: [usize; 3], params: &DeformParams, seed: u64) -> Result<DeformField, AugmentError> {
    params.validate()?;
    if dims.iter().any(|&e| e < 2) {
        return Err(AugmentError::Dims(format!("field dims {dims:?} must be >= 2 on every axis")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = draw_in(&mut rng, params.sigma_low, params.sigma_high);
    let n: usize = dims.iter().product();
    if params.alpha == 0.0 {
        return Ok(DeformField::zeros(dims));
    }
    let kernels: Vec<Vec<f64>> = dims
        .iter()
        .map(|&e| {
            let s = match params.sigma_units {
                SigmaUnits::Fraction => sigma * e as f64,
                SigmaUnits::Voxels => sigma,
            };
            gaussian_kernel(s, params.truncate)
        })
        .collect();
    let mut components: [Vec<f32>; 3] = Default::default();
    for comp in components.iter_mut() {
        let mut raw: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        smooth_axis(&mut raw, 1, dims[0], dims[1] * dims[2], &kernels[0]);
        smooth_axis(&mut raw, dims[0], dims[1], dims[2], &kernels[1]);
        smooth_axis(&mut raw, dims[0] * dims[1], dims[2], 1, &kernels[2]);
        *comp = raw.iter().map(|v| (v * params.alpha) as f32).collect();
    }
    Ok(DeformField { dims, components })
}

fn source_index(coord: f32, extent: usize, policy: OutOfBounds) -> Option<usize> {
    let s = (coord + 0.5).floor();
    if s >= 0.0 && s < extent as f32 {
        return Some(s as usize);
    }
    match policy {
        OutOfBounds::Background => None,
        OutOfBounds::Clamp => Some(if s < 0.0 { 0 } else { extent - 1 }),
    }
}

/// Warp intensity and label volumes by the same field. The target voxel `v`
/// takes the nearest source voxel to `v + Δ_v`.
pub fn elastic_deform(
    x: &Volume,
    y: &LabelVolume,
    field: &DeformField,
    policy: OutOfBounds,
) -> Result<(Volume, LabelVolume), AugmentError> {
    let dims = x.dims();
    if y.dims() != dims || field.dims() != dims {
        return Err(AugmentError::Dims(format!(
            "intensity {:?}, labels {:?}, field {:?}",
            dims,
            y.dims(),
            field.dims()
        )));
    }
    let n = x.len();
    let mut xo = Vec::with_capacity(n);
    let mut yo = Vec::with_capacity(n);
    for h in 0..dims[0] {
        for w in 0..dims[1] {
            for d in 0..dims[2] {
                let delta = field.get(h, w, d);
                let src = (
                    source_index(h as f32 + delta[0], dims[0], policy),
                    source_index(w as f32 + delta[1], dims[1], policy),
                    source_index(d as f32 + delta[2], dims[2], policy),
                );
                match src {
                    (Some(sh), Some(sw), Some(sd)) => {
                        xo.push(x.get(sh, sw, sd));
                        yo.push(y.get(sh, sw, sd));
                    }
                    _ => {
                        xo.push(0.0);
                        yo.push(0);
                    }
                }
            }
        }
    }
    Ok((
        x.with_data(xo)?,
        LabelVolume::new(dims, y.spacing(), y.num_classes(), yo)?,
    ))
}

/// Derive an independent stream seed from a base seed and a tag.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Elastic deformation followed by noise, with sub-seeds derived from `seed`.
/// `None` disables a stage.
pub fn augment_pair(
    x: &Volume,
    y: &LabelVolume,
    deform: Option<&DeformParams>,
    noise: Option<&NoiseParams>,
    seed: u64,
) -> Result<(Volume, LabelVolume), AugmentError> {
    let (mut xo, mut yo) = (x.clone(), y.clone());
    if let Some(p) = deform {
        let field = make_deform_field(x.dims(), p, derive_seed(seed, 1))?;
        (xo, yo) = elastic_deform(&xo, &yo, &field, p.out_of_bounds)?;
    }
    if let Some(p) = noise {
        xo = gaussian_noise(&xo, p, derive_seed(seed, 2))?;
    }
    Ok((xo, yo))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3]) -> (Volume, LabelVolume) {
        let x = Volume::from_fn(dims, [1.0; 3], |h, w, d| (h * 100 + w * 10 + d) as f32).unwrap();
        let y = LabelVolume::from_fn(dims, [1.0; 3], 4, |h, w, d| ((h + w + d) % 3 + 1) as u32).unwrap();
        (x, y)
    }

    #[test]
    fn kernel_is_normalized() {
        let k = gaussian_kernel(2.0, 3.0);
        assert_eq!(k.len(), 13);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shift_by_one() {
        let (x, y) = ramp([4, 3, 2]);
        let f = DeformField::constant(x.dims(), [1.0, 0.0, 0.0]);
        let (xo, yo) = elastic_deform(&x, &y, &f, OutOfBounds::Background).unwrap();
        for w in 0..3 {
            for d in 0..2 {
                for h in 0..3 {
                    assert_eq!(xo.get(h, w, d), x.get(h + 1, w, d));
                }
                assert_eq!(xo.get(3, w, d), 0.0);
                assert_eq!(yo.get(3, w, d), 0);
            }
        }
        let (xc, _) = elastic_deform(&x, &y, &f, OutOfBounds::Clamp).unwrap();
        assert_eq!(xc.get(3, 0, 0), x.get(3, 0, 0));
    }

    #[test]
    fn zero_alpha_zero_field() {
        let p = DeformParams {
            alpha: 0.0,
            ..Default::default()
        };
        assert_eq!(make_deform_field([5, 6, 7], &p, 3).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn zero_noise_is_identity() {
        let (x, _) = ramp([3, 3, 3]);
        assert_eq!(gaussian_noise(&x, &NoiseParams::fixed(0.0), 1).unwrap(), x);
    }

    #[test]
    fn param_validation() {
        assert!(NoiseParams { sigma_low: 0.2, sigma_high: 0.1 }.validate().is_err());
        let p = DeformParams {
            sigma_low: 0.0,
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }
}
