//! Dense row-major f64 tensors.
//!
//! A `Tensor` is an immutable shape + data value. Data is behind an `Arc` so
//! clones are cheap; the recording tape in [`crate::autodiff`] hands out
//! tensors that additionally carry a node handle for gradient lookup.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Identifies a node on a specific tape. Tapes are numbered globally so that
/// a tensor recorded on one tape cannot silently be fed into another.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TapeSlot {
    pub tape: u64,
    pub node: usize,
}

#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    /// Set when this tensor is the output of a recorded operation.
    tape_id: Option<TapeSlot>,
}

impl Tensor {
    /// Builds a tensor from external input, rejecting shape/length mismatch
    /// and non-finite values.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "tensor shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value {bad} rejected at tensor construction"
            )));
        }
        Ok(Tensor::from_parts(shape, data))
    }

    /// Internal constructor for operation outputs; assumes the caller got the
    /// bookkeeping right.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data: Arc::new(data), tape_id: None }
    }

    /// Internal constructor sharing an existing allocation.
    pub(crate) fn from_shared(shape: Vec<usize>, data: Arc<Vec<f64>>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data, tape_id: None }
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel = shape.iter().product();
        Tensor::from_parts(shape, vec![0.0; numel])
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Tensor {
        let numel = shape.iter().product();
        Tensor::from_parts(shape, vec![value; numel])
    }

    /// Single-element tensor, used for losses and learned scalars.
    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_parts(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    /// Extracts the value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn tape_id(&self) -> Option<TapeSlot> {
        self.tape_id
    }

    pub(crate) fn with_tape_id(mut self, slot: TapeSlot) -> Tensor {
        self.tape_id = Some(slot);
        self
    }

    /// Same data viewed under a new shape with equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.numel(),
            "reshape {:?} -> {:?} changes element count",
            self.shape,
            shape
        );
        Tensor { shape, data: Arc::clone(&self.data), tape_id: None }
    }

    /// Replaces the data of a parameter tensor in place (optimizer updates).
    /// Breaks sharing if the data is aliased.
    pub(crate) fn data_mut(&mut self) -> &mut Vec<f64> {
        self.tape_id = None;
        Arc::make_mut(&mut self.data)
    }
}

/// Row-major strides for a shape.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}
