use std::rc::Rc;

use super::kernels::{self, ConvGeometry};
use super::tape::{Backward, Tape, Var};
use super::{Tensor, TensorError};
use crate::halfprec::{quantize_slice, OpClass};

struct ConvBackward {
    geom: ConvGeometry,
    x: Rc<Tensor>,
    w: Rc<Tensor>,
}

impl Backward for ConvBackward {
    fn backward(&self, grad: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let gx = needs[0].then(|| {
            let mut gx = vec![0.0; self.x.numel()];
            kernels::conv3d_backward_input(&self.geom, grad, self.w.data(), &mut gx);
            gx
        });
        let has_bias = needs.len() > 2;
        let want_b = has_bias && needs[2];
        let (gw, gb) = if needs[1] || want_b {
            let mut gw = vec![0.0; self.w.numel()];
            let mut gb = want_b.then(|| vec![0.0; self.geom.out_channels]);
            kernels::conv3d_backward_weight(&self.geom, grad, self.x.data(), &mut gw, gb.as_deref_mut());
            (needs[1].then_some(gw), gb)
        } else {
            (None, None)
        };
        let mut out = vec![gx, gw];
        if has_bias {
            out.push(gb);
        }
        out
    }
}

struct NormBackward {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    gamma: Rc<Tensor>,
    channels: usize,
    spatial: usize,
}

impl Backward for NormBackward {
    fn backward(&self, grad: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let (c_n, len) = (self.channels, self.spatial);
        let instances = self.inv_std.len();
        let mut gx = needs[0].then(|| vec![0.0f32; grad.len()]);
        let mut ggamma = vec![0.0f32; c_n];
        let mut gbeta = vec![0.0f32; c_n];
        for inst in 0..instances {
            let c = inst % c_n;
            let g = &grad[inst * len..][..len];
            let xh = &self.xhat[inst * len..][..len];
            let mut gsum = 0.0f64;
            let mut gxsum = 0.0f64;
            for i in 0..len {
                gsum += g[i] as f64;
                gxsum += g[i] as f64 * xh[i] as f64;
            }
            let (gsum, gxsum) = (gsum as f32, gxsum as f32);
            ggamma[c] += gxsum;
            gbeta[c] += gsum;
            if let Some(gx) = gx.as_mut() {
                let k = self.gamma.data()[c] * self.inv_std[inst] / len as f32;
                let n = len as f32;
                let dst = &mut gx[inst * len..][..len];
                for i in 0..len {
                    dst[i] = k * (n * g[i] - gsum - xh[i] * gxsum);
                }
            }
        }
        vec![gx, needs[1].then_some(ggamma), needs[2].then_some(gbeta)]
    }
}

struct ReluBackward {
    out: Rc<Tensor>,
}

impl Backward for ReluBackward {
    fn backward(&self, grad: &[f32], _needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let gx = grad
            .iter()
            .zip(self.out.data())
            .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
            .collect();
        vec![Some(gx)]
    }
}

struct SoftmaxBackward {
    out: Rc<Tensor>,
}

impl Backward for SoftmaxBackward {
    fn backward(&self, grad: &[f32], _needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let y = self.out.data();
        let [n_n, c_n, ..] = self.out.shape();
        let len = self.out.spatial_len();
        let mut gx = vec![0.0f32; grad.len()];
        for n in 0..n_n {
            let base = n * c_n * len;
            for v in 0..len {
                let mut dot = 0.0f32;
                for c in 0..c_n {
                    let i = base + c * len + v;
                    dot += grad[i] * y[i];
                }
                for c in 0..c_n {
                    let i = base + c * len + v;
                    gx[i] = y[i] * (grad[i] - dot);
                }
            }
        }
        vec![Some(gx)]
    }
}

struct ResizeBackward {
    in_shape: super::Shape,
    target: [usize; 3],
}

impl Backward for ResizeBackward {
    fn backward(&self, grad: &[f32], _needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        vec![Some(kernels::trilinear_adjoint(grad, self.in_shape, self.target))]
    }
}

struct ConcatBackward {
    batch: usize,
    spatial: usize,
    channels: Vec<usize>,
}

impl Backward for ConcatBackward {
    fn backward(&self, grad: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let total: usize = self.channels.iter().sum();
        let mut out = Vec::with_capacity(self.channels.len());
        let mut start = 0;
        for (i, &c) in self.channels.iter().enumerate() {
            if needs[i] {
                let mut g = Vec::with_capacity(self.batch * c * self.spatial);
                for n in 0..self.batch {
                    let from = (n * total + start) * self.spatial;
                    g.extend_from_slice(&grad[from..from + c * self.spatial]);
                }
                out.push(Some(g));
            } else {
                out.push(None);
            }
            start += c;
        }
        out
    }
}

struct AddBackward;

impl Backward for AddBackward {
    fn backward(&self, grad: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        needs.iter().map(|&n| n.then(|| grad.to_vec())).collect()
    }
}

struct ScaleBackward(f32);

impl Backward for ScaleBackward {
    fn backward(&self, grad: &[f32], _needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        vec![Some(grad.iter().map(|g| g * self.0).collect())]
    }
}

struct SumBackward(usize);

impl Backward for SumBackward {
    fn backward(&self, grad: &[f32], _needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        vec![Some(vec![grad[0]; self.0])]
    }
}

fn quantized(t: &Tensor) -> Rc<Tensor> {
    let mut q = t.clone();
    quantize_slice(q.data_mut());
    Rc::new(q)
}

impl Tape {
    /// 3D cross-correlation with zero padding.
    ///
    /// `w` has shape `(Cout, Cin, k, k, k)`; `bias`, when given, holds `Cout`
    /// values.
    pub fn conv3d(&self, x: &Var, w: &Var, bias: Option<&Var>, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let geom = ConvGeometry::new(x.shape(), w.shape(), stride, pad)?;
        if let Some(b) = bias {
            if b.value().numel() != geom.out_channels {
                return Err(TensorError::shape(
                    "conv3d",
                    format!("bias has {} values for {} output channels", b.value().numel(), geom.out_channels),
                ));
            }
        }
        let half = self.rounds(OpClass::Conv);
        let (xs, ws) = if half {
            (quantized(x.value()), quantized(w.value()))
        } else {
            (x.shared(), w.shared())
        };
        let bs = bias.map(|b| if half { quantized(b.value()) } else { b.shared() });
        let mut out = Tensor::zeros(geom.output_shape());
        kernels::conv3d_forward(&geom, xs.data(), ws.data(), bs.as_ref().map(|b| b.data()), out.data_mut());
        let op = ConvBackward { geom, x: xs, w: ws };
        let mut inputs = vec![x, w];
        if let Some(b) = bias {
            inputs.push(b);
        }
        Ok(self.record(out, &inputs, OpClass::Conv, op))
    }

    /// Per-instance normalization over the spatial voxels of each
    /// `(sample, channel)`, followed by a per-channel affine map.
    pub fn instance_norm(&self, x: &Var, gamma: &Var, beta: &Var, eps: f32) -> Result<Var, TensorError> {
        let xv = x.value();
        let c_n = xv.channels();
        if gamma.value().numel() != c_n || beta.value().numel() != c_n {
            return Err(TensorError::shape(
                "instance_norm",
                format!(
                    "affine parameters have {}/{} values for {} channels",
                    gamma.value().numel(),
                    beta.value().numel(),
                    c_n
                ),
            ));
        }
        let len = xv.spatial_len();
        if len == 0 {
            return Err(TensorError::shape("instance_norm", "empty spatial extent"));
        }
        let instances = xv.batch() * c_n;
        let mut xhat = vec![0.0f32; xv.numel()];
        let mut inv_std = vec![0.0f32; instances];
        let mut out = Tensor::zeros(xv.shape());
        let (g, b) = (gamma.value().data(), beta.value().data());
        for inst in 0..instances {
            let c = inst % c_n;
            let src = &xv.data()[inst * len..][..len];
            let mean64 = src.iter().map(|&v| v as f64).sum::<f64>() / len as f64;
            let var = src.iter().map(|&v| (v as f64 - mean64).powi(2)).sum::<f64>() / len as f64;
            let mean = mean64 as f32;
            let inv = (1.0 / (var + eps as f64).sqrt()) as f32;
            inv_std[inst] = inv;
            let xh = &mut xhat[inst * len..][..len];
            let dst = &mut out.data_mut()[inst * len..][..len];
            for i in 0..len {
                xh[i] = (src[i] - mean) * inv;
                dst[i] = g[c] * xh[i] + b[c];
            }
        }
        let op = NormBackward {
            xhat,
            inv_std,
            gamma: gamma.shared(),
            channels: c_n,
            spatial: len,
        };
        Ok(self.record(out, &[x, gamma, beta], OpClass::Norm, op))
    }

    pub fn relu(&self, x: &Var) -> Var {
        let mut out = x.value().clone();
        for v in out.data_mut() {
            if !(*v > 0.0) {
                *v = 0.0;
            }
        }
        let out = Rc::new(out);
        let op = ReluBackward { out: Rc::clone(&out) };
        let value = Rc::try_unwrap(out).unwrap_or_else(|rc| (*rc).clone());
        self.record(value, &[x], OpClass::Pointwise, op)
    }

    /// Softmax over the channel axis at every voxel, with max subtraction.
    pub fn softmax_channels(&self, x: &Var) -> Var {
        let xv = x.value();
        let [n_n, c_n, ..] = xv.shape();
        let len = xv.spatial_len();
        let mut out = Tensor::zeros(xv.shape());
        let src = xv.data();
        let dst = out.data_mut();
        for n in 0..n_n {
            let base = n * c_n * len;
            for v in 0..len {
                let mut max = f32::NEG_INFINITY;
                for c in 0..c_n {
                    max = max.max(src[base + c * len + v]);
                }
                let mut sum = 0.0f32;
                for c in 0..c_n {
                    let e = (src[base + c * len + v] - max).exp();
                    dst[base + c * len + v] = e;
                    sum += e;
                }
                let inv = 1.0 / sum;
                for c in 0..c_n {
                    dst[base + c * len + v] *= inv;
                }
            }
        }
        self.round_if(OpClass::Softmax, out.data_mut());
        let shared = Rc::new(out.clone());
        self.record(out, &[x], OpClass::Softmax, SoftmaxBackward { out: shared })
    }

    /// Trilinear resize of the spatial axes (half-pixel centers).
    pub fn trilinear_resize(&self, x: &Var, target: [usize; 3]) -> Result<Var, TensorError> {
        if target.contains(&0) {
            return Err(TensorError::shape("trilinear_resize", format!("target {target:?} has an empty axis")));
        }
        let shape = x.shape();
        if target == x.value().spatial() {
            return Ok(x.clone());
        }
        let data = kernels::trilinear(x.value().data(), shape, target);
        let out = Tensor::from_vec([shape[0], shape[1], target[0], target[1], target[2]], data)?;
        Ok(self.record(
            out,
            &[x],
            OpClass::Pointwise,
            ResizeBackward {
                in_shape: shape,
                target,
            },
        ))
    }

    /// Concatenate along the channel axis, preserving input order.
    pub fn concat_channels(&self, xs: &[&Var]) -> Result<Var, TensorError> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::shape("concat_channels", "no inputs"))?
            .shape();
        for x in xs {
            let s = x.shape();
            if s[0] != first[0] || s[2..] != first[2..] {
                return Err(TensorError::shape(
                    "concat_channels",
                    format!("input {:?} does not match {:?} outside the channel axis", s, first),
                ));
            }
        }
        if xs.len() == 1 {
            return Ok(xs[0].clone());
        }
        let channels: Vec<usize> = xs.iter().map(|x| x.shape()[1]).collect();
        let total: usize = channels.iter().sum();
        let spatial = xs[0].value().spatial_len();
        let mut data = Vec::with_capacity(first[0] * total * spatial);
        for n in 0..first[0] {
            for (x, &c) in xs.iter().zip(&channels) {
                data.extend_from_slice(&x.value().data()[n * c * spatial..][..c * spatial]);
            }
        }
        let out = Tensor::from_vec([first[0], total, first[2], first[3], first[4]], data)?;
        let op = ConcatBackward {
            batch: first[0],
            spatial,
            channels,
        };
        Ok(self.record(out, xs, OpClass::Pointwise, op))
    }

    /// Element-wise sum of equally shaped tensors.
    pub fn add(&self, x: &Var, y: &Var) -> Result<Var, TensorError> {
        if x.shape() != y.shape() {
            return Err(TensorError::shape(
                "add",
                format!("{:?} vs {:?}", x.shape(), y.shape()),
            ));
        }
        let mut out = x.value().clone();
        for (a, b) in out.data_mut().iter_mut().zip(y.value().data()) {
            *a += b;
        }
        Ok(self.record(out, &[x, y], OpClass::Pointwise, AddBackward))
    }

    /// Multiply by a constant.
    pub fn scale(&self, x: &Var, factor: f32) -> Var {
        let mut out = x.value().clone();
        for v in out.data_mut() {
            *v *= factor;
        }
        self.record(out, &[x], OpClass::Loss, ScaleBackward(factor))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self, x: &Var) -> Var {
        let mut acc = 0.0f32;
        for v in x.value().data() {
            acc += v;
        }
        self.record(Tensor::scalar(acc), &[x], OpClass::Loss, SumBackward(x.value().numel()))
    }

    /// Round a value through FP16 when `class` is cast under the tape's
    /// policy; gradients pass through unchanged apart from the same rounding.
    pub fn cast(&self, x: &Var, class: OpClass) -> Var {
        if !self.rounds(class) {
            return x.clone();
        }
        self.record(x.value().clone(), &[x], class, ScaleBackward(1.0))
    }
}
