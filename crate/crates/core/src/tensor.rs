//! Dense row-major tensors.
//!
//! `Tensor<T>` is a flat buffer plus a shape; the training code works on the
//! raw slices for speed and uses the shape for contract checks at module
//! boundaries. `TensorF16` stores raw binary16 bit patterns -- it is the
//! storage format of working weights, activations-in-transit and gradient
//! payloads on the simulated interconnect.

use crate::error::{Error, Result};
use crate::half::Half;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;

impl<T: Copy + Default> Tensor<T> {
    pub fn zeros(dims: &[usize]) -> Self {
        let len = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![T::default(); len] }
    }

    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let want: usize = dims.iter().product();
        if data.len() != want {
            return Err(Error::ShapeMismatch {
                op: "Tensor::from_vec",
                detail: format!("dims {:?} need {} elements, got {}", dims, want, data.len()),
            });
        }
        Ok(Tensor { dims: dims.to_vec(), data })
    }
}

impl<T> Tensor<T> {
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.rank(), 2, "rows() needs a rank-2 tensor");
        self.dims[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.rank(), 2, "cols() needs a rank-2 tensor");
        self.dims[1]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorF16 {
    dims: Vec<usize>,
    data: Vec<Half>,
}

impl TensorF16 {
    pub fn zeros(dims: &[usize]) -> Self {
        let len = dims.iter().product();
        TensorF16 { dims: dims.to_vec(), data: vec![Half::ZERO; len] }
    }

    pub fn from_vec(dims: &[usize], data: Vec<Half>) -> Result<Self> {
        let want: usize = dims.iter().product();
        if data.len() != want {
            return Err(Error::ShapeMismatch {
                op: "TensorF16::from_vec",
                detail: format!("dims {:?} need {} elements, got {}", dims, want, data.len()),
            });
        }
        Ok(TensorF16 { dims: dims.to_vec(), data })
    }

    /// Round an f32 tensor into binary16 storage (nearest-even per element).
    pub fn from_f32(t: &TensorF32) -> Self {
        let data = t.data().iter().map(|&x| Half::from_f32(x)).collect();
        TensorF16 { dims: t.dims().to_vec(), data }
    }

    /// Widen back to f32; every binary16 value is exactly representable.
    pub fn widen(&self) -> TensorF32 {
        let data = self.data.iter().map(|h| h.to_f32()).collect();
        Tensor { dims: self.dims.clone(), data }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Half] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Half] {
        &mut self.data
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.rank(), 2, "rows() needs a rank-2 tensor");
        self.dims[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.rank(), 2, "cols() needs a rank-2 tensor");
        self.dims[1]
    }
}
