//! Model side of the streaming trajectory predictor.

pub mod batch;
pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod loss;
pub mod model;
pub mod multiagent;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod stream;
pub mod target;
pub mod train;

pub use batch::Batch;
pub use config::ModelConfig;
pub use model::{ForwardOptions, ForwardOutput, Prediction, SeamModel};
pub use nn::Ctx;
pub use stream::{run_stream, StreamState};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Data(#[from] seam_core::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stream error: {0}")]
    Stream(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged: {0}")]
    NonFinite(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
