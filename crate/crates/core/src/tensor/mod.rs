//! Dense n-dimensional tensors with reverse-mode automatic differentiation.
//!
//! The op set is deliberately small: exactly what the bundled CNN and the
//! entropy/cross-entropy losses need. Reductions run in a fixed
//! left-to-right serial order so that repeated forward passes over the same
//! inputs are bit-identical, which the replay tests rely on.

mod fd;
mod graph;
mod kernels;

pub use fd::finite_difference_grad;
pub use graph::{Gradients, Graph, NodeId};

use std::fmt;
use std::str::FromStr;

use num_traits::{Float, NumCast};
use thiserror::Error;

/// Scalar element type. 64-bit is used by the test suite and all gradient
/// checks; 32-bit is the default for experiment runs.
pub trait Scalar:
    Float + NumCast + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// Tag byte identifying the precision in file headers.
    const TAG: u8;
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    /// Reads one scalar from exactly `Self::BYTES` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const TAG: u8 = 1;
    const BYTES: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }
}

impl Scalar for f64 {
    const TAG: u8 = 2;
    const BYTES: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid tensor: {0}")]
    Invalid(String),
    #[error("backward requires a scalar loss, got {numel} elements")]
    NonScalarLoss { numel: usize },
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("unsupported op kind `{0}`")]
    UnsupportedKind(String),
}

/// The supported op kinds. `FromStr` rejects anything else.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Add,
    Conv2d,
    MaxPool2d,
    Relu,
    BatchNorm2d,
    LogSoftmax,
    Sum,
    Mean,
    Mul,
    Neg,
    Exp,
}

impl OpKind {
    pub const ALL: [OpKind; 12] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Conv2d,
        OpKind::MaxPool2d,
        OpKind::Relu,
        OpKind::BatchNorm2d,
        OpKind::LogSoftmax,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Mul,
        OpKind::Neg,
        OpKind::Exp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Conv2d => "conv2d",
            OpKind::MaxPool2d => "maxpool2d",
            OpKind::Relu => "relu",
            OpKind::BatchNorm2d => "batchnorm2d",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Mul => "mul",
            OpKind::Neg => "neg",
            OpKind::Exp => "exp",
        }
    }
}

impl FromStr for OpKind {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| TensorError::UnsupportedKind(s.to_string()))
    }
}

/// Batch-norm execution mode.
///
/// `Train` normalizes with batch statistics and updates the running
/// statistics; `Eval` normalizes with the running statistics; `Adapt`
/// normalizes with batch statistics while leaving the running statistics
/// frozen (the test-time adaptation convention).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
    Adapt,
}

/// Per-layer batch-norm running statistics. Not part of the parameter
/// vector: they are state, frozen during adaptation.
#[derive(Debug, Clone, PartialEq)]
pub struct BnLayerStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

impl<S: Scalar> BnLayerStats<S> {
    pub fn init(channels: usize) -> Self {
        Self {
            mean: vec![S::zero(); channels],
            var: vec![S::one(); channels],
        }
    }
}

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

/// A dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Invalid(format!(
                "all dimensions must be >= 1, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Invalid(format!(
                "shape {:?} implies {} elements, buffer holds {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self::from_vec(shape, vec![S::zero(); numel]).expect("zeros shape")
    }

    pub fn filled(shape: Vec<usize>, v: S) -> Self {
        let numel = shape.iter().product();
        Self::from_vec(shape, vec![v; numel]).expect("filled shape")
    }

    pub fn scalar(v: S) -> Self {
        Self::from_vec(vec![1], vec![v]).expect("scalar")
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) || numel != self.data.len() {
            return Err(TensorError::Invalid(format!(
                "cannot reshape {} elements to {shape:?}",
                self.data.len()
            )));
        }
        self.shape = shape;
        Ok(self)
    }
}
