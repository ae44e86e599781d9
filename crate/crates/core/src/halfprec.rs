//! Software binary16 arithmetic and the mixed-precision training policy.
//!
//! [`Half`] is a bit-exact IEEE 754 half-precision value (1 sign bit, 5
//! exponent bits with bias 15, 10 mantissa bits). Conversions from `f32`
//! round to nearest, ties to even, and produce subnormals down to 2^-24.
//!
//! The policy types decide which tensors pass through FP16 rounding at each
//! optimization level, mirroring the O0..O3 levels of common AMP tooling.

use std::fmt;
use std::str::FromStr;

use crate::tensor::Tensor;

/// A 16-bit IEEE 754 floating-point value stored as its raw bit pattern.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Half(u16);

impl Half {
    pub const ZERO: Half = Half(0x0000);
    pub const ONE: Half = Half(0x3C00);
    pub const INFINITY: Half = Half(0x7C00);
    pub const NEG_INFINITY: Half = Half(0xFC00);
    pub const NAN: Half = Half(0x7E00);
    /// Largest finite value, 65504.
    pub const MAX: Half = Half(0x7BFF);
    /// Smallest positive normal value, 2^-14.
    pub const MIN_POSITIVE: Half = Half(0x0400);
    /// Smallest positive subnormal value, 2^-24.
    pub const MIN_POSITIVE_SUBNORMAL: Half = Half(0x0001);

    pub const fn from_bits(bits: u16) -> Self {
        Half(bits)
    }

    pub const fn to_bits(self) -> u16 {
        self.0
    }

    pub const fn sign(self) -> u16 {
        self.0 >> 15
    }

    /// Biased exponent field E.
    pub const fn exponent(self) -> u16 {
        (self.0 >> 10) & 0x1F
    }

    /// Mantissa field M.
    pub const fn mantissa(self) -> u16 {
        self.0 & 0x03FF
    }

    pub fn is_nan(self) -> bool {
        self.exponent() == 0x1F && self.mantissa() != 0
    }

    pub fn is_finite(self) -> bool {
        self.exponent() != 0x1F
    }

    pub fn from_f32(x: f32) -> Self {
        encode_fp16(x)
    }

    pub fn to_f32(self) -> f32 {
        decode_fp16(self)
    }
}

impl fmt::Debug for Half {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Half({:#06x} = {})", self.0, self.to_f32())
    }
}

impl fmt::Display for Half {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.to_f32(), f)
    }
}

impl From<Half> for f32 {
    fn from(h: Half) -> f32 {
        decode_fp16(h)
    }
}

/// Round an `f32` to the nearest binary16 value (ties to even).
///
/// Magnitudes that round above 65504 become infinity. Values below half the
/// smallest subnormal become signed zero. NaN stays NaN with the quiet bit set
/// and the top mantissa bits carried over.
pub fn encode_fp16(x: f32) -> Half {
    let bits = x.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let abs = bits & 0x7FFF_FFFF;

    if abs >= 0x7F80_0000 {
        if abs == 0x7F80_0000 {
            return Half(sign | 0x7C00);
        }
        let payload = ((abs >> 13) & 0x03FF) as u16;
        return Half(sign | 0x7C00 | 0x0200 | payload);
    }
    // 65520 is the midpoint between 65504 and 2^16; it and everything above
    // rounds to infinity.
    if abs >= 0x477F_F000 {
        return Half(sign | 0x7C00);
    }

    let exp = ((abs >> 23) as i32) - 127;
    let mant = abs & 0x007F_FFFF;

    if exp >= -14 {
        let mut h = (((exp + 15) as u32) << 10) | (mant >> 13);
        let rest = mant & 0x1FFF;
        if rest > 0x1000 || (rest == 0x1000 && (h & 1) == 1) {
            // A carry out of the mantissa bumps the exponent, which is the
            // correct encoding of the rounded value.
            h += 1;
        }
        return Half(sign | h as u16);
    }
    if exp < -25 {
        return Half(sign);
    }

    // Subnormal result: express the value in units of 2^-24.
    let significand = mant | 0x0080_0000;
    let shift = (-exp - 1) as u32; // 14..=24
    let mut q = significand >> shift;
    let rest = significand & ((1u32 << shift) - 1);
    let halfway = 1u32 << (shift - 1);
    if rest > halfway || (rest == halfway && (q & 1) == 1) {
        q += 1;
    }
    Half(sign | q as u16)
}

/// Exact widening conversion of a binary16 value to `f32`.
pub fn decode_fp16(h: Half) -> f32 {
    let bits = h.0 as u32;
    let sign = (bits & 0x8000) << 16;
    let exp = (bits >> 10) & 0x1F;
    let mant = bits & 0x03FF;

    match exp {
        0 => {
            // Zero or subnormal: mant * 2^-24, exact in f32.
            let mag = mant as f32 * f32::from_bits(0x3380_0000);
            if sign != 0 {
                -mag
            } else {
                mag
            }
        }
        0x1F => {
            if mant == 0 {
                f32::from_bits(sign | 0x7F80_0000)
            } else {
                f32::from_bits(sign | 0x7FC0_0000 | (mant << 13))
            }
        }
        _ => f32::from_bits(sign | ((exp + 127 - 15) << 23) | (mant << 13)),
    }
}

/// `decode(encode(x))`: the value `x` takes after a trip through FP16 storage.
#[inline]
pub fn round_to_fp16(x: f32) -> f32 {
    decode_fp16(encode_fp16(x))
}

pub fn quantize_slice(values: &mut [f32]) {
    for v in values {
        *v = round_to_fp16(*v);
    }
}

/// Element-wise FP16 round trip of a tensor.
pub fn quantize_tensor(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    quantize_slice(out.data_mut());
    out
}

/// One tensor-core style tile operation: `D = A * B + C` with FP16 tiles
/// `A`, `B` and FP32 accumulation into `C`.
///
/// Products of two FP16 values are exact in FP32; the sums accumulate in
/// FP32 starting from `C`, in ascending `k` order.
pub fn fma_mixed(a: &[[Half; 4]; 4], b: &[[Half; 4]; 4], c: &[[f32; 4]; 4]) -> [[f32; 4]; 4] {
    let mut d = *c;
    for i in 0..4 {
        for j in 0..4 {
            let mut acc = c[i][j];
            for k in 0..4 {
                acc += decode_fp16(a[i][k]) * decode_fp16(b[k][j]);
            }
            d[i][j] = acc;
        }
    }
    d
}

/// Whether the optimizer should apply or skip the current update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleDecision {
    Apply,
    Skip,
}

/// Dynamic loss scale schedule.
///
/// The scale stays an exact power of two and never drops below 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LossScaler {
    scale: f32,
    pub growth_interval: u32,
    pub growth_factor: f32,
    pub backoff_factor: f32,
    good_steps: u32,
}

impl Default for LossScaler {
    fn default() -> Self {
        LossScaler {
            scale: 65536.0,
            growth_interval: 2000,
            growth_factor: 2.0,
            backoff_factor: 0.5,
            good_steps: 0,
        }
    }
}

fn is_power_of_two(x: f32) -> bool {
    x.is_finite() && x > 0.0 && (x.to_bits() & 0x007F_FFFF) == 0 && x.to_bits() >> 23 != 0
}

impl LossScaler {
    /// Scaler starting at `initial_scale`, which must be a power of two ≥ 1.
    pub fn new(initial_scale: f32) -> Option<Self> {
        if !is_power_of_two(initial_scale) || initial_scale < 1.0 {
            return None;
        }
        Some(LossScaler {
            scale: initial_scale,
            ..Default::default()
        })
    }

    pub fn with_schedule(mut self, growth_interval: u32, growth_factor: f32, backoff_factor: f32) -> Option<Self> {
        if growth_interval == 0
            || !is_power_of_two(growth_factor)
            || growth_factor < 1.0
            || !is_power_of_two(backoff_factor)
            || backoff_factor > 1.0
        {
            return None;
        }
        self.growth_interval = growth_interval;
        self.growth_factor = growth_factor;
        self.backoff_factor = backoff_factor;
        Some(self)
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn good_steps(&self) -> u32 {
        self.good_steps
    }

    /// Advance the schedule after one backward pass.
    pub fn step(&mut self, grads_finite: bool) -> ScaleDecision {
        if grads_finite {
            self.good_steps += 1;
            if self.good_steps >= self.growth_interval {
                let grown = self.scale * self.growth_factor;
                if grown.is_finite() {
                    self.scale = grown;
                }
                self.good_steps = 0;
            }
            ScaleDecision::Apply
        } else {
            self.scale = (self.scale * self.backoff_factor).max(1.0);
            self.good_steps = 0;
            ScaleDecision::Skip
        }
    }

    pub fn scale_loss(&self, loss: f32) -> f32 {
        loss * self.scale
    }

    /// Divide every gradient by the current scale. Returns `false` when any
    /// gradient is non-finite, which the caller reports to [`LossScaler::step`].
    pub fn unscale_grads<'a, I>(&self, grads: I) -> bool
    where
        I: IntoIterator<Item = &'a mut [f32]>,
    {
        let mut finite = true;
        for g in grads {
            for v in g.iter_mut() {
                *v /= self.scale;
                finite &= v.is_finite();
            }
        }
        finite
    }
}

/// AMP-style optimization level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PrecisionLevel {
    /// O0: pure FP32.
    Full,
    /// O1: convolutions round their inputs and outputs to FP16 and
    /// accumulate in FP32; normalization, softmax, losses and reductions
    /// stay FP32.
    MixedSafe,
    /// O2: as O1, plus FP16 weights and input data and FP16 pointwise ops,
    /// with FP32 master weights.
    MixedCast,
    /// O3: everything in FP16, including weights and optimizer state.
    Half,
}

impl PrecisionLevel {
    pub fn name(self) -> &'static str {
        match self {
            PrecisionLevel::Full => "o0",
            PrecisionLevel::MixedSafe => "o1",
            PrecisionLevel::MixedCast => "o2",
            PrecisionLevel::Half => "o3",
        }
    }
}

impl fmt::Display for PrecisionLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PrecisionLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "o0" | "full" => Ok(PrecisionLevel::Full),
            "o1" | "mixed_safe" => Ok(PrecisionLevel::MixedSafe),
            "o2" | "mixed_cast" => Ok(PrecisionLevel::MixedCast),
            "o3" | "half" => Ok(PrecisionLevel::Half),
            other => Err(format!("unknown precision level `{other}` (expected o0, o1, o2 or o3)")),
        }
    }
}

/// Operation classes that the cast table distinguishes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpClass {
    /// Convolutions and other GEMM-shaped work.
    Conv,
    /// Instance normalization.
    Norm,
    /// ReLU, residual sums, concatenation, interpolation.
    Pointwise,
    Softmax,
    /// Loss functions and scalar reductions.
    Loss,
    /// Network input data.
    Input,
    /// Parameters as seen by the forward pass.
    Weight,
}

/// Per-level cast table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrecisionPolicy {
    pub level: PrecisionLevel,
}

impl PrecisionPolicy {
    pub const FULL: PrecisionPolicy = PrecisionPolicy {
        level: PrecisionLevel::Full,
    };

    pub fn new(level: PrecisionLevel) -> Self {
        PrecisionPolicy { level }
    }

    /// Whether tensors produced (and gradients consumed) by `class` pass
    /// through FP16 rounding.
    pub fn rounds(&self, class: OpClass) -> bool {
        use OpClass::*;
        match self.level {
            PrecisionLevel::Full => false,
            PrecisionLevel::MixedSafe => matches!(class, Conv),
            PrecisionLevel::MixedCast => matches!(class, Conv | Pointwise | Input | Weight),
            PrecisionLevel::Half => true,
        }
    }

    /// FP32 master copies are kept and updated by the optimizer.
    pub fn keeps_master_weights(&self) -> bool {
        matches!(self.level, PrecisionLevel::MixedSafe | PrecisionLevel::MixedCast)
    }

    /// Parameters (and optimizer state) live in FP16 with no master copy.
    pub fn half_storage(&self) -> bool {
        self.level == PrecisionLevel::Half
    }
}

impl Default for PrecisionPolicy {
    fn default() -> Self {
        PrecisionPolicy::FULL
    }
}

/// FP32 master parameters with optional FP16 working copies.
#[derive(Debug, Clone)]
pub struct MasterWeights {
    policy: PrecisionPolicy,
    master: Vec<Tensor>,
    working: Option<Vec<Vec<Half>>>,
}

impl MasterWeights {
    pub fn new(params: Vec<Tensor>, policy: PrecisionPolicy) -> Self {
        let mut master = params;
        if policy.half_storage() {
            for p in &mut master {
                quantize_slice(p.data_mut());
            }
        }
        let mut mw = MasterWeights {
            policy,
            master,
            working: None,
        };
        if policy.keeps_master_weights() {
            mw.refresh_working();
        }
        mw
    }

    pub fn policy(&self) -> PrecisionPolicy {
        self.policy
    }

    pub fn master(&self) -> &[Tensor] {
        &self.master
    }

    pub fn master_mut(&mut self) -> &mut [Tensor] {
        &mut self.master
    }

    pub fn working(&self) -> Option<&[Vec<Half>]> {
        self.working.as_deref()
    }

    pub fn into_master(self) -> Vec<Tensor> {
        self.master
    }

    /// Re-derive storage after the optimizer has written new master values:
    /// FP16 working copies are re-rounded from the masters, and FP16-only
    /// storage is rounded in place.
    pub fn refresh_working(&mut self) {
        if self.policy.half_storage() {
            for p in &mut self.master {
                quantize_slice(p.data_mut());
            }
        }
        if self.policy.keeps_master_weights() {
            self.working = Some(
                self.master
                    .iter()
                    .map(|p| p.data().iter().map(|&v| encode_fp16(v)).collect())
                    .collect(),
            );
        }
    }

    /// Parameter values the forward pass should see.
    pub fn forward_values(&self) -> Vec<Tensor> {
        match (&self.working, self.policy.rounds(OpClass::Weight)) {
            (Some(working), true) => self
                .master
                .iter()
                .zip(working)
                .map(|(m, w)| Tensor::from_vec(m.shape(), w.iter().map(|h| h.to_f32()).collect()).expect("same shape"))
                .collect(),
            _ => self.master.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_encodes_to_3c00() {
        let h = encode_fp16(1.0);
        assert_eq!(h.to_bits(), 0x3C00);
        assert_eq!((h.sign(), h.exponent(), h.mantissa()), (0, 15, 0));
        assert_eq!(decode_fp16(h), 1.0);
    }

    #[test]
    fn range_endpoints() {
        assert_eq!(Half::MAX.to_f32(), 65504.0);
        assert_eq!(Half::MIN_POSITIVE.to_f32(), 2f32.powi(-14));
        assert_eq!(format!("{:.3e}", Half::MIN_POSITIVE.to_f32()), "6.104e-5");
        assert_eq!(format!("{:.3e}", Half::MAX.to_f32()), "6.550e4");
        assert_eq!(Half::MIN_POSITIVE_SUBNORMAL.to_f32(), 2f32.powi(-24));
    }

    #[test]
    fn rounding_boundaries() {
        // 2^-25 is exactly half of the smallest subnormal: ties to even -> 0.
        assert_eq!(round_to_fp16(2f32.powi(-25)), 0.0);
        // Slightly above the tie rounds up.
        assert_eq!(round_to_fp16(2f32.powi(-25) * 1.0001), 2f32.powi(-24));
        assert_eq!(round_to_fp16(1e5), f32::INFINITY);
        assert_eq!(round_to_fp16(-1e5), f32::NEG_INFINITY);
        assert_eq!(round_to_fp16(65519.0), 65504.0);
        assert_eq!(round_to_fp16(65520.0), f32::INFINITY);
        // 1 + 2^-11 is a tie between 1 and 1 + 2^-10: even mantissa wins.
        assert_eq!(round_to_fp16(1.0 + 2f32.powi(-11)), 1.0);
        assert_eq!(round_to_fp16(1.0 + 3.0 * 2f32.powi(-11)), 1.0 + 2.0 * 2f32.powi(-10));
        assert!(round_to_fp16(f32::NAN).is_nan());
        assert_eq!(encode_fp16(-0.0).to_bits(), 0x8000);
    }

    #[test]
    fn subnormal_carry_into_normal() {
        // Largest subnormal plus a bit more than half a unit rounds to the
        // smallest normal.
        let largest_sub = 1023.0 * 2f32.powi(-24);
        let x = largest_sub + 0.75 * 2f32.powi(-24);
        assert_eq!(encode_fp16(x), Half::MIN_POSITIVE);
    }

    #[test]
    fn scaler_rules() {
        let mut sc = LossScaler::new(65536.0).unwrap();
        assert_eq!(sc.step(false), ScaleDecision::Skip);
        assert_eq!(sc.scale(), 32768.0);

        let mut sc = LossScaler::new(1024.0).unwrap();
        for _ in 0..1999 {
            assert_eq!(sc.step(true), ScaleDecision::Apply);
        }
        assert_eq!(sc.scale(), 1024.0);
        sc.step(true);
        assert_eq!(sc.scale(), 2048.0);
        assert_eq!(sc.good_steps(), 0);

        let mut sc = LossScaler::new(1.0).unwrap();
        assert_eq!(sc.step(false), ScaleDecision::Skip);
        assert_eq!(sc.scale(), 1.0);
    }

    #[test]
    fn scaler_rejects_non_powers_of_two() {
        assert!(LossScaler::new(3.0).is_none());
        assert!(LossScaler::new(0.5).is_none());
        assert!(LossScaler::new(f32::INFINITY).is_none());
    }

    #[test]
    fn unscale_reports_overflow() {
        let sc = LossScaler::new(256.0).unwrap();
        let mut a = vec![256.0f32, 512.0];
        let mut b = vec![f32::INFINITY];
        assert!(sc.unscale_grads([a.as_mut_slice()]));
        assert_eq!(a, vec![1.0, 2.0]);
        assert!(!sc.unscale_grads([b.as_mut_slice()]));
    }

    #[test]
    fn fma_tiles() {
        let one = Half::ONE;
        let z = Half::ZERO;
        let mut ident = [[z; 4]; 4];
        for (i, row) in ident.iter_mut().enumerate() {
            row[i] = one;
        }
        let b: [[Half; 4]; 4] =
            std::array::from_fn(|i| std::array::from_fn(|j| encode_fp16((i * 4 + j) as f32 * 0.37 - 2.0)));
        let d = fma_mixed(&ident, &b, &[[0.0; 4]; 4]);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(d[i][j], b[i][j].to_f32());
            }
        }
        let ones = [[one; 4]; 4];
        assert_eq!(fma_mixed(&ones, &ones, &[[0.0; 4]; 4]), [[4.0; 4]; 4]);
    }

    #[test]
    fn policy_table() {
        let o0 = PrecisionPolicy::new(PrecisionLevel::Full);
        let o1 = PrecisionPolicy::new(PrecisionLevel::MixedSafe);
        let o3 = PrecisionPolicy::new(PrecisionLevel::Half);
        for class in [OpClass::Conv, OpClass::Norm, OpClass::Loss, OpClass::Weight] {
            assert!(!o0.rounds(class));
            assert!(o3.rounds(class));
        }
        assert!(o1.rounds(OpClass::Conv));
        assert!(!o1.rounds(OpClass::Norm));
        assert!(!o1.rounds(OpClass::Softmax));
        assert!(!o1.rounds(OpClass::Loss));
        assert_eq!("o1".parse::<PrecisionLevel>().unwrap(), PrecisionLevel::MixedSafe);
        assert!("o4".parse::<PrecisionLevel>().is_err());
    }

    #[test]
    fn working_copy_tracks_master() {
        let t = Tensor::from_vec([1, 1, 1, 1, 3], vec![0.1, 1.0 / 3.0, 70000.0]).unwrap();
        let mut mw = MasterWeights::new(vec![t], PrecisionPolicy::new(PrecisionLevel::MixedCast));
        mw.master_mut()[0].data_mut()[0] = 0.2;
        mw.refresh_working();
        let working = mw.working().unwrap();
        for (m, w) in mw.master()[0].data().iter().zip(&working[0]) {
            assert_eq!(encode_fp16(*m), *w);
        }
        assert_eq!(mw.master()[0].data()[2], 70000.0);
        assert_eq!(mw.forward_values()[0].data()[2], f32::INFINITY);

        let t = Tensor::from_vec([1, 1, 1, 1, 1], vec![0.1]).unwrap();
        let mw = MasterWeights::new(vec![t], PrecisionPolicy::new(PrecisionLevel::Half));
        assert_eq!(mw.master()[0].data()[0], round_to_fp16(0.1));
        assert!(mw.working().is_none());
    }
}
