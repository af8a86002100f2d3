//! Minimal dense network toolkit with reverse-mode gradients.

pub mod checkpoint;
mod dense;
pub mod gradcheck;
pub mod loss;
mod optim;
mod tensor;

pub use checkpoint::Checkpoint;
pub use dense::{sigmoid, softmax_in_place, Activation, Dense, DenseNet, Trace, LEAKY_SLOPE};
pub use optim::Sgd;
pub use tensor::Tensor;
