//! Small deterministic neural-network core.
//!
//! A fixed vocabulary of layers with hand-written backward passes, an Adam
//! optimizer, a seeded generator, and the `.wts` weights format. Everything is
//! generic over [`Scalar`] so gradient checks can run in `f64` while training
//! runs in `f32`.

mod layers;
mod optim;
mod rng;
mod tensor;
mod weights;

pub use layers::{
    add_channel_bias, add_channel_bias_backward, avg_pool2, avg_pool2_backward, concat_channels,
    mse, silu, silu_backward, split_channels, upsample2, upsample2_backward, Conv2d, Dense,
    GroupNorm, Module,
};
pub use optim::{Adam, AdamConfig};
pub use rng::SeededRng;
pub use tensor::{Parameter, Scalar, Tensor};
pub use weights::{load_into, read_weights, save_module, write_weights, NamedTensor, WEIGHTS_MAGIC};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("bad weights file: {0}")]
    BadWeights(String),
    #[error("parameter {0} missing from weights file")]
    MissingParameter(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NeuralError> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> NeuralError {
    NeuralError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}
