pub mod adapt;
pub mod data;
pub mod model;
pub mod optim;
pub mod rng;
pub mod shift;
pub mod tensor;

pub use model::{
    Architecture, BnRunningStats, Checkpoint, ModelSpec, ParameterVector, SubsetSelector,
};
pub use tensor::{Graph, NodeId, Scalar, Tensor, TensorError};
