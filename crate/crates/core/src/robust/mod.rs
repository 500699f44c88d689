//! Robustness protocols: partial response modification and full context
//! modification, with deterministic generators and an optional LLM provider.

mod dataset;
mod judge;
mod llm;
mod protocols;
mod responder;
mod variants;

pub use dataset::{ConversationalDataset, EvalConversation, EvalTurn};
pub use judge::{
    content_overlap, content_words, has_anaphora, judge_query_reasonable, HeuristicJudge, Judge,
    JudgeVerdict, LlmJudge, ANAPHORA, OVERLAP_THRESHOLD,
};
pub use llm::{judge_prompt, parse_yes_no, response_prompt, LlmClient, LlmConfig};
pub use protocols::{
    full_context_eval, normal_eval, partial_response_eval, robust_csv, robust_report,
    robust_table,
    FullContextOutcome, PartialResponseOutcome, ProtocolConfig, RobustSummary, PRIMARY_METRIC,
};
pub use responder::{
    lead_sentence, synthesize_response, GoldResponder, LeadSentenceResponder, LlmResponder,
    Responder, Response, MAX_RESPONSE_TOKENS,
};
pub use variants::{full_context_variants, rewrite_only_words, ContextVariant, VariantKind, N_VARIANTS};

use crate::index::IndexError;

#[derive(Debug, thiserror::Error)]
pub enum RobustError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("query judged unreasonable but no rewrite is available")]
    MissingRewrite,
    #[error("provider: {0}")]
    Llm(String),
    #[error(transparent)]
    Index(#[from] IndexError),
}
