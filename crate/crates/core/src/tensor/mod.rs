//! Forward-only inference over [`NetGraph`](crate::netgraph::NetGraph)s.
//!
//! Activations are dense NCHW `f32` tensors. Every kernel validates its
//! input shapes and the forward pass rejects any non-finite activation.
//! Normalization always uses the statistics of the batch being processed.

mod forward;
pub mod kernels;
pub mod simd;
mod weights;

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

pub use forward::{forward, forward_layerwise};
pub use weights::{init_weights, NodeWeights, WeightSet};

#[derive(Clone, Debug, PartialEq)]
pub enum TensorError {
    Shape { op: &'static str, detail: alloc::string::String },
    NonFinite { node: usize },
    WeightsMismatch,
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::Shape { op, detail } => write!(f, "{op}: {detail}"),
            TensorError::NonFinite { node } => write!(f, "non-finite activation at node {node}"),
            TensorError::WeightsMismatch => f.write_str("weights do not match the network"),
        }
    }
}

impl core::error::Error for TensorError {}

/// Dense `(n, c, h, w)` tensor, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Self, TensorError> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(TensorError::Shape {
                op: "tensor",
                detail: alloc::format!("{} values for shape {shape:?}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Size of one `(h, w)` plane.
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        let [_, cs, hs, ws] = self.shape;
        self.data[((n * cs + c) * hs + y) * ws + x]
    }

    pub fn is_finite(&self) -> bool {
        // finite iff the exponent field is not all ones
        const EXP: u32 = 0x7f80_0000;
        self.data.iter().fold(0u32, |m, v| m.max(v.to_bits() & EXP)) < EXP
    }
}
