//! Raw slice kernels behind the tape operations.
//!
//! Convolution accumulates every output element in a fixed order: input
//! channel, then kernel depth, height, width, with the bias added last.
//! Out-of-range taps (zero padding) are skipped.

use super::{Shape, TensorError};

/// Output extent of a convolution along one axis, `None` when it would be
/// smaller than one voxel.
pub fn conv_output_extent(extent: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || extent + 2 * pad < kernel {
        return None;
    }
    Some((extent + 2 * pad - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeometry {
    pub fn new(x: Shape, w: Shape, stride: usize, pad: usize) -> Result<Self, TensorError> {
        let k = w[2];
        if w[3] != k || w[4] != k {
            return Err(TensorError::shape("conv3d", format!("kernel must be cubic, got {:?}", &w[2..])));
        }
        if k % 2 == 0 {
            return Err(TensorError::shape("conv3d", format!("kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(TensorError::shape("conv3d", "stride must be at least 1"));
        }
        if x[1] != w[1] {
            return Err(TensorError::shape(
                "conv3d",
                format!("input has {} channels, weights expect {}", x[1], w[1]),
            ));
        }
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = conv_output_extent(x[2 + a], k, stride, pad).ok_or_else(|| {
                TensorError::shape(
                    "conv3d",
                    format!("extent {} with kernel {k}, stride {stride}, padding {pad} gives no output", x[2 + a]),
                )
            })?;
        }
        Ok(ConvGeometry {
            batch: x[0],
            in_channels: x[1],
            out_channels: w[0],
            kernel: k,
            stride,
            pad,
            input: [x[2], x[3], x[4]],
            output,
        })
    }

    pub fn output_shape(&self) -> Shape {
        [self.batch, self.out_channels, self.output[0], self.output[1], self.output[2]]
    }

    fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    /// Output indices `o` whose tap `o * stride + tap - pad` lands inside the
    /// input along `axis`.
    fn valid(&self, axis: usize, tap: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if tap >= p { 0 } else { (p - tap).div_ceil(s) };
        let reach = self.input[axis] + p;
        let hi = if reach > tap {
            ((reach - tap - 1) / s + 1).min(self.output[axis])
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn weight_offset(&self, co: usize, ci: usize, kd: usize, kh: usize, kw: usize) -> usize {
        let k = self.kernel;
        (((co * self.in_channels + ci) * k + kd) * k + kh) * k + kw
    }
}

/// `out = conv(x, w) + bias`, cross-correlation with zero padding.
pub fn conv3d_forward(g: &ConvGeometry, x: &[f32], w: &[f32], bias: Option<&[f32]>, out: &mut [f32]) {
    let (in_len, out_len) = (g.in_len(), g.out_len());
    let [_, ih_n, iw_n] = g.input;
    let [_, oh_n, ow_n] = g.output;
    let (s, p, k) = (g.stride, g.pad, g.kernel);
    out.fill(0.0);
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            let dst = &mut out[(n * g.out_channels + co) * out_len..][..out_len];
            for ci in 0..g.in_channels {
                let src = &x[(n * g.in_channels + ci) * in_len..][..in_len];
                for kd in 0..k {
                    let (d_lo, d_hi) = g.valid(0, kd);
                    for kh in 0..k {
                        let (h_lo, h_hi) = g.valid(1, kh);
                        for kw in 0..k {
                            let (w_lo, w_hi) = g.valid(2, kw);
                            let wv = w[g.weight_offset(co, ci, kd, kh, kw)];
                            for od in d_lo..d_hi {
                                let id = od * s + kd - p;
                                for oh in h_lo..h_hi {
                                    let ih = oh * s + kh - p;
                                    let orow = &mut dst[(od * oh_n + oh) * ow_n..][..ow_n];
                                    let irow = &src[(id * ih_n + ih) * iw_n..][..iw_n];
                                    if s == 1 {
                                        let off = kw as isize - p as isize;
                                        for ow in w_lo..w_hi {
                                            orow[ow] += wv * irow[(ow as isize + off) as usize];
                                        }
                                    } else {
                                        for ow in w_lo..w_hi {
                                            orow[ow] += wv * irow[ow * s + kw - p];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if let Some(b) = bias {
                for v in dst.iter_mut() {
                    *v += b[co];
                }
            }
        }
    }
}

/// Gradient with respect to the input: `gx += conv^T(gy, w)`.
pub fn conv3d_backward_input(g: &ConvGeometry, gy: &[f32], w: &[f32], gx: &mut [f32]) {
    let (in_len, out_len) = (g.in_len(), g.out_len());
    let [_, ih_n, iw_n] = g.input;
    let [_, oh_n, ow_n] = g.output;
    let (s, p, k) = (g.stride, g.pad, g.kernel);
    for n in 0..g.batch {
        for ci in 0..g.in_channels {
            let dst = &mut gx[(n * g.in_channels + ci) * in_len..][..in_len];
            for co in 0..g.out_channels {
                let src = &gy[(n * g.out_channels + co) * out_len..][..out_len];
                for kd in 0..k {
                    let (d_lo, d_hi) = g.valid(0, kd);
                    for kh in 0..k {
                        let (h_lo, h_hi) = g.valid(1, kh);
                        for kw in 0..k {
                            let (w_lo, w_hi) = g.valid(2, kw);
                            let wv = w[g.weight_offset(co, ci, kd, kh, kw)];
                            for od in d_lo..d_hi {
                                let id = od * s + kd - p;
                                for oh in h_lo..h_hi {
                                    let ih = oh * s + kh - p;
                                    let grow = &src[(od * oh_n + oh) * ow_n..][..ow_n];
                                    let xrow = &mut dst[(id * ih_n + ih) * iw_n..][..iw_n];
                                    for ow in w_lo..w_hi {
                                        xrow[ow * s + kw - p] += wv * grow[ow];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients with respect to the weights (and the bias when `gb` is given).
pub fn conv3d_backward_weight(g: &ConvGeometry, gy: &[f32], x: &[f32], gw: &mut [f32], gb: Option<&mut [f32]>) {
    let (in_len, out_len) = (g.in_len(), g.out_len());
    let [_, ih_n, iw_n] = g.input;
    let [_, oh_n, ow_n] = g.output;
    let (s, p, k) = (g.stride, g.pad, g.kernel);
    for co in 0..g.out_channels {
        for ci in 0..g.in_channels {
            for kd in 0..k {
                let (d_lo, d_hi) = g.valid(0, kd);
                for kh in 0..k {
                    let (h_lo, h_hi) = g.valid(1, kh);
                    for kw in 0..k {
                        let (w_lo, w_hi) = g.valid(2, kw);
                        let mut acc = 0.0f64;
                        for n in 0..g.batch {
                            let grad = &gy[(n * g.out_channels + co) * out_len..][..out_len];
                            let src = &x[(n * g.in_channels + ci) * in_len..][..in_len];
                            for od in d_lo..d_hi {
                                let id = od * s + kd - p;
                                for oh in h_lo..h_hi {
                                    let ih = oh * s + kh - p;
                                    let grow = &grad[(od * oh_n + oh) * ow_n..][..ow_n];
                                    let xrow = &src[(id * ih_n + ih) * iw_n..][..iw_n];
                                    for ow in w_lo..w_hi {
                                        acc += grow[ow] as f64 * xrow[ow * s + kw - p] as f64;
                                    }
                                }
                            }
                        }
                        gw[g.weight_offset(co, ci, kd, kh, kw)] += acc as f32;
                    }
                }
            }
        }
    }
    if let Some(gb) = gb {
        for co in 0..g.out_channels {
            let mut acc = 0.0f64;
            for n in 0..g.batch {
                for v in &gy[(n * g.out_channels + co) * out_len..][..out_len] {
                    acc += *v as f64;
                }
            }
            gb[co] += acc as f32;
        }
    }
}

/// Linear interpolation taps for resampling one axis from `from` to `to`
/// samples, half-pixel centers (align-corners false).
#[derive(Debug, Clone, PartialEq)]
pub struct AxisTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f32>,
}

impl AxisTaps {
    pub fn new(from: usize, to: usize) -> Self {
        let scale = from as f64 / to as f64;
        let mut taps = AxisTaps {
            lo: Vec::with_capacity(to),
            hi: Vec::with_capacity(to),
            frac: Vec::with_capacity(to),
        };
        for t in 0..to {
            let src = ((t as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(from - 1);
            let hi = (lo + 1).min(from - 1);
            let frac = if hi == lo { 0.0 } else { (src - lo as f64) as f32 };
            taps.lo.push(lo);
            taps.hi.push(hi);
            taps.frac.push(frac);
        }
        taps
    }

    pub fn len(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.is_empty()
    }
}

/// Resample the middle axis of a `[outer, from, inner]` array to
/// `[outer, to, inner]`.
pub fn resample_axis(src: &[f32], outer: usize, from: usize, inner: usize, taps: &AxisTaps) -> Vec<f32> {
    let to = taps.len();
    let mut dst = vec![0.0f32; outer * to * inner];
    for o in 0..outer {
        let s = &src[o * from * inner..][..from * inner];
        let d = &mut dst[o * to * inner..][..to * inner];
        for t in 0..to {
            let a = &s[taps.lo[t] * inner..][..inner];
            let b = &s[taps.hi[t] * inner..][..inner];
            let f = taps.frac[t];
            let row = &mut d[t * inner..][..inner];
            for i in 0..inner {
                row[i] = a[i] + f * (b[i] - a[i]);
            }
        }
    }
    dst
}

/// Adjoint of [`resample_axis`].
pub fn resample_axis_adjoint(grad: &[f32], outer: usize, from: usize, inner: usize, taps: &AxisTaps) -> Vec<f32> {
    let to = taps.len();
    let mut dst = vec![0.0f32; outer * from * inner];
    for o in 0..outer {
        let g = &grad[o * to * inner..][..to * inner];
        let d = &mut dst[o * from * inner..][..from * inner];
        for t in 0..to {
            let f = taps.frac[t];
            let (lo, hi) = (taps.lo[t], taps.hi[t]);
            for i in 0..inner {
                let gv = g[t * inner + i];
                d[lo * inner + i] += gv * (1.0 - f);
                d[hi * inner + i] += gv * f;
            }
        }
    }
    dst
}

/// Trilinear resize of every `(n, c)` instance, applied as three separable
/// linear passes (D, then H, then W).
pub fn trilinear(src: &[f32], shape: Shape, target: [usize; 3]) -> Vec<f32> {
    let nc = shape[0] * shape[1];
    let [d0, h0, w0] = [shape[2], shape[3], shape[4]];
    let [d1, h1, w1] = target;
    let mut cur = src.to_vec();
    if d1 != d0 {
        cur = resample_axis(&cur, nc, d0, h0 * w0, &AxisTaps::new(d0, d1));
    }
    if h1 != h0 {
        cur = resample_axis(&cur, nc * d1, h0, w0, &AxisTaps::new(h0, h1));
    }
    if w1 != w0 {
        cur = resample_axis(&cur, nc * d1 * h1, w0, 1, &AxisTaps::new(w0, w1));
    }
    cur
}

/// Adjoint of [`trilinear`].
pub fn trilinear_adjoint(grad: &[f32], shape: Shape, target: [usize; 3]) -> Vec<f32> {
    let nc = shape[0] * shape[1];
    let [d0, h0, w0] = [shape[2], shape[3], shape[4]];
    let [d1, h1, w1] = target;
    let mut cur = grad.to_vec();
    if w1 != w0 {
        cur = resample_axis_adjoint(&cur, nc * d1 * h1, w0, 1, &AxisTaps::new(w0, w1));
    }
    if h1 != h0 {
        cur = resample_axis_adjoint(&cur, nc * d1, h0, w0, &AxisTaps::new(h0, h1));
    }
    if d1 != d0 {
        cur = resample_axis_adjoint(&cur, nc, d0, h0 * w0, &AxisTaps::new(d0, d1));
    }
    cur
}
