//! Small decoder-style transformer used as the shared session and passage
//! encoder, its attention masks, and text-embedding helpers.

mod config;
mod embedder;
mod encoder;
mod mask;
mod weights;

pub use config::ModelConfig;
pub use embedder::{LexicalEmbedder, Retriever, TextEmbedder};
pub use encoder::{
    bind_params, check_trailing_specials, embed_in_graph, embed_text, embed_texts, encode,
    extract_session_anchors, forward, lm_logits, sinusoidal_positions, Encoded, ForwardOutput,
    SessionAnchor, LAYER_NORM_EPS,
};
pub use mask::{build_causal_mask, build_session_mask, AttentionMask};
pub use weights::{param_shapes, LayerParams, ModelParams, ModelWeights};

use crate::numeric::NumericError;
use crate::text::TextError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("model configuration: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Text(#[from] TextError),
}
