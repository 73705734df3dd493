//! Minimal `f64` neural-network toolkit: NCHW tensors, a handful of layers
//! with explicit backward passes, Adam, and the two losses the models need.

pub mod chain;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod sequential;
pub mod tensor;

pub use chain::Chain;
pub use layers::{
    minibatch_features, sigmoid, BatchNorm2d, Conv2d, Dense, LeakyRelu, MaxPool2d, MinibatchDiscrimination, Param,
    Relu, Reshape, ResizeNearest, Sigmoid,
};
pub use optim::Adam;
pub use sequential::{Layer, Sequential};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid layer state: {0}")]
    State(String),
}

pub type Result<T> = std::result::Result<T, NnError>;
