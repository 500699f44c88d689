//! Batching, the dual-objective training loop, hard-negative mining and
//! checkpoints.

mod checkpoint;
mod config;
mod mining;
mod schedule;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{Ablation, Preset, TrainConfig};
pub use mining::{mine_hard_negatives, train_with_remining, MinedDraw, MiningConfig, MiningOutcome};
pub use schedule::{make_batches, BatchSchedule};
pub use train::{
    accumulate_gradients, micro_batches, prepare_samples, trace_csv, train, train_steps,
    StepGradients, TraceRow, TrainState,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::index::IndexError;
use crate::model::ModelError;
use crate::numeric::NumericError;
use crate::objectives::ObjectiveError;
use crate::text::TextError;

/// Independent random stream for `(seed, domain, index)`.
pub(crate) fn sub_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.rotate_left(32));
    rng.set_stream(index);
    rng
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training configuration: {0}")]
    Config(String),
    #[error("non-finite {component} at step {step} (sample {sample})")]
    NonFinite {
        step: usize,
        sample: String,
        component: &'static str,
    },
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint version {found} is incompatible with this build (expected {expected})")]
    Incompatible { found: u32, expected: u32 },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Index(#[from] IndexError),
}
