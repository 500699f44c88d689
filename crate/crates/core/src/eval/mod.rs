//! TREC-style qrels and run files, and the ranking metrics NDCG@k, recall@k
//! and MRR@k.

mod metrics;
mod trec;

pub use metrics::{evaluate, mrr_at_k, ndcg_at_k, recall_at_k, EvalReport, QueryMetrics};
pub use trec::{
    load_qrels, load_run, parse_qrels, parse_run, run_from_results, write_run, Qrels, Run,
    RunEntry,
};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("run for query {qid}: {message}")]
    Run { qid: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
