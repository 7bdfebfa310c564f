//! Function approximators: dense Mish networks with hand-written reverse-mode
//! gradients, the Adam optimizer, and the Gaussian / categorical heads used by
//! every learned component.

mod adam;
mod dist;
mod mlp;

pub use adam::{Adam, AdamConfig};
pub use dist::{
    categorical_entropy, categorical_sample, gaussian_entropy, gaussian_log_prob,
    kl_to_standard_normal, log_softmax, softmax, GaussianForward, GaussianGrads, GaussianHead,
    StdMode, HALF_LN_2PI,
};
pub use mlp::{mish, mish_grad, sigmoid, softplus, Dense, Mlp, MlpCache, MlpGrads};

#[derive(Debug, thiserror::Error)]
pub enum ApproxError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid layer widths {0:?}")]
    InvalidWidths(Vec<usize>),
    #[error("cache does not belong to the current parameters")]
    StaleCache,
    #[error("non-finite gradient")]
    NonFiniteGradient,
}
