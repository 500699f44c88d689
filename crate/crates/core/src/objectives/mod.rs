//! Training objectives: the contrastive ranking loss, the session-masked LM
//! loss, their weighted combination, and an independent two-pass reference
//! for the masked loss.

mod batch;
mod contrastive;
mod oracle;
mod session_lm;

pub use batch::{micro_batch_loss, BatchLoss, ObjectiveConfig, PreparedBatch, PreparedSample};
pub use contrastive::{contrastive_loss, contrastive_loss_value, score_phi, ContrastiveConfig};
pub use oracle::two_pass_lm_loss_oracle;
pub use session_lm::{
    session_lm_graph, session_masked_lm_loss, LmMask, SessionLmOutput,
};

use serde::{Deserialize, Serialize};

use crate::model::ModelError;
use crate::numeric::{Graph, NumericError, Var};

/// Weight of the LM term in `L = L_C + α·L_S`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if self.alpha >= 0.0 && self.alpha.is_finite() {
            Ok(())
        } else {
            Err(ObjectiveError::Config(format!(
                "alpha must be a non-negative finite number, got {}",
                self.alpha
            )))
        }
    }
}

/// `L_C + α·L_S`.
pub fn combined_loss(g: &mut Graph, contrastive: Var, lm: Var, w: LossWeights) -> Result<Var, ObjectiveError> {
    let weighted = g.scale(lm, w.alpha);
    Ok(g.add(contrastive, weighted)?)
}

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error("objective configuration: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}
