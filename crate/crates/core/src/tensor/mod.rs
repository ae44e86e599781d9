//! Dense rank-5 tensors `(N, C, D, H, W)` and reverse-mode differentiation.
//!
//! [`Tensor`] is plain storage. Differentiable computation goes through a
//! [`Tape`]: every operation on [`Var`] handles whose inputs need gradients
//! is recorded in creation order, and [`Tape::backward`] replays the adjoints
//! in exact reverse order.

pub mod kernels;
mod ops;
mod tape;

use thiserror::Error;

pub use kernels::{conv_output_extent, ConvGeometry};
pub use tape::{Backward, NodeId, Tape, Var};

/// `(N, C, D, H, W)`, W fastest.
pub type Shape = [usize; 5];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape error: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("contract violation: {0}")]
    Contract(String),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Shape {
            op,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
    requires_grad: bool,
}

pub fn numel(shape: &Shape) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Tensor {
            shape,
            data: vec![value; numel(&shape)],
            requires_grad: false,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self::full([1, 1, 1, 1, 1], value)
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self, TensorError> {
        if data.len() != numel(&shape) {
            return Err(TensorError::shape(
                "from_vec",
                format!("{} values for shape {:?}", data.len(), shape),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 5]) -> f32) -> Self {
        let mut data = Vec::with_capacity(numel(&shape));
        for n in 0..shape[0] {
            for c in 0..shape[1] {
                for d in 0..shape[2] {
                    for h in 0..shape[3] {
                        for w in 0..shape[4] {
                            data.push(f([n, c, d, h, w]));
                        }
                    }
                }
            }
        }
        Tensor {
            shape,
            data,
            requires_grad: false,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    pub fn spatial_len(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn offset(&self, idx: [usize; 5]) -> usize {
        let s = &self.shape;
        (((idx[0] * s[1] + idx[1]) * s[2] + idx[2]) * s[3] + idx[3]) * s[4] + idx[4]
    }

    pub fn get(&self, idx: [usize; 5]) -> f32 {
        self.data[self.offset(idx)]
    }

    /// Values of one `(sample, channel)` instance.
    pub fn instance(&self, n: usize, c: usize) -> &[f32] {
        let len = self.spatial_len();
        let start = (n * self.shape[1] + c) * len;
        &self.data[start..start + len]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn item(&self) -> Option<f32> {
        (self.data.len() == 1).then(|| self.data[0])
    }
}
