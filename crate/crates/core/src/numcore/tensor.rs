//! Dense row-major tensors with 32-bit storage.
//!
//! Every value that flows through the compute graph is one of these. Shapes
//! are plain `Vec<usize>`; a scalar is any tensor with exactly one element.

use std::fmt;

/// Error type for tensor construction and access.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Data length does not match the product of the shape dims.
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
    /// An index was out of bounds for the given axis.
    IndexOutOfBounds { axis: usize, index: usize, dim: usize },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeDataMismatch { shape, len } => {
                write!(f, "shape {:?} needs {} elements, got {}", shape, shape.iter().product::<usize>(), len)
            }
            TensorError::IndexOutOfBounds { axis, index, dim } => {
                write!(f, "index {} out of bounds for axis {} with dim {}", index, axis, dim)
            }
        }
    }
}

impl std::error::Error for TensorError {}

/// Dense row-major tensor, f32 storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking that `data.len()` matches the shape.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Tensor, TensorError> {
        let need: usize = shape.iter().product();
        if data.len() != need {
            return Err(TensorError::ShapeDataMismatch { shape, len: data.len() });
        }
        Ok(Tensor { shape, data })
    }

    /// All-zeros tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    /// All-ones tensor of the given shape.
    pub fn ones(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![1.0; n] }
    }

    /// Tensor of the given shape filled with `v`.
    pub fn full(shape: &[usize], v: f32) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    /// Single-element tensor holding `v`.
    pub fn scalar(v: f32) -> Tensor {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Total element count.
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Number of axes.
    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() on tensor with {} elements", self.data.len());
        self.data[0]
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Consumes the tensor and returns its flat data.
    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}
