//! Reference trainer: stacked Dense/activation/Dropout/Lambda layers with
//! parameter sharing, reverse-mode gradients and plain SGD.
//!
//! Everything is generic over [`Scalar`]; `f32` is the production type and
//! `f64` is used for finite-difference verification.

pub mod lambda;
pub mod network;
mod scalar;
pub mod spec;
mod tensor;
pub mod train;

pub use lambda::{LambdaBackward, LambdaForward, LambdaRegistry};
pub use network::{
    build_network, dropout_seed, prng, sgd_step, Backward, DenseParams, Gradients, Mode, Network,
    NetworkState, Prng, Tape,
};
pub use scalar::Scalar;
pub use spec::{LayerKind, LayerSpec, NetworkSpec, SpecShapes};
pub use tensor::Tensor;
pub use train::{
    accuracy, loss_and_grad, train_epochs, train_step, Batch, BatchSource, EpochLoss, Loss,
    MemorySource, Targets,
};
