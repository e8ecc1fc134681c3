//! Lean convolutions and the residual-network stack built on them.
//!
//! The central operator is a fused kernel that applies a 1x1 channel-mixing
//! convolution and a per-channel 4-point stencil in a single pass over the
//! input. The crate also provides the unfused two-pass decomposition of that
//! operator, a dense 3x3 baseline, hand-written backward passes for every
//! layer, network assembly for the A-F configurations, an ADAM training loop,
//! binary dataset loaders, and a CPU timing harness comparing the fused kernel
//! against its decomposition.

pub mod bench;
pub mod conv;
pub mod conv3d;
pub mod data;
pub mod layers;
pub mod network;
pub mod optim;
pub mod tensor;
pub mod verify;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("non-finite gradient in parameter group `{group}`")]
    NonFiniteGradient { group: String },
    #[error("{file}: {detail}")]
    DataFormat { file: String, detail: String },
    #[error("checkpoint {file}: {detail}")]
    Checkpoint { file: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn invalid(msg: impl ToString) -> Self {
        Error::InvalidArgument(msg.to_string())
    }
}
