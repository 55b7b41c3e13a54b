//! The toy invariant message-passing model with interchangeable
//! displacement heads, its losses, training loop, and metrics.

mod loss;
mod metrics;
mod net;
mod noisy;
mod params;
mod tape;
mod train;

pub use loss::{attach_loss, effective_weights, LossIds, LossTarget, LossTerms, LossWeights};
pub use metrics::{evaluate, evaluate_with_graphs, Metrics, DEFAULT_AEWT_THRESHOLD};
pub use net::{forward, gbf_encode, ForwardOptions, ForwardOutput, ForwardPass, ModelInput};
pub use noisy::{noisy_augment, noisy_augment_record, noisy_augment_with_alpha};
pub use params::{Checkpoint, HeadMode, ModelDims, ModelParams, TensorEntry, CHECKPOINT_FORMAT};
pub use train::{batch_gradient, train, EpochStats, TrainConfig, TrainItem};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss diverged at epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("checkpoint io: {0}")]
    Io(String),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Tape(#[from] tape::TapeError),
}
