//! End-to-end helpers shared by the CLI and the acceptance runs: vocabulary
//! construction, dataset retrieval into runs, and evaluation.

use crate::eval::{evaluate, run_from_results, EvalReport, Qrels, Run};
use crate::index::{EmbeddingIndex, IndexError, SearchResult};
use crate::model::TextEmbedder;
use crate::robust::ConversationalDataset;
use crate::text::{Passage, Session, TrainingSample, Vocabulary};

/// Word vocabulary over training sessions, positives, negatives and corpus.
pub fn build_vocabulary(train: &[TrainingSample], corpus: &[Passage], max_words: usize) -> Vocabulary {
    let mut texts: Vec<&str> = Vec::new();
    for s in train {
        texts.extend(s.session.turns.iter().map(|t| t.text.as_str()));
        texts.push(&s.positive.text);
        texts.extend(s.hard_negatives.iter().map(|p| p.text.as_str()));
    }
    texts.extend(corpus.iter().map(|p| p.text.as_str()));
    Vocabulary::build(texts, max_words)
}

/// What the encoder sees for each evaluation turn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SessionInput {
    /// History plus the current query.
    Full,
    /// The current query alone.
    QueryOnly,
}

/// Retrieves the top `k` passages for `(qid, session)` pairs.
pub fn retrieve_sessions(
    embedder: &dyn TextEmbedder,
    index: &EmbeddingIndex,
    sessions: &[(String, Session)],
    k: usize,
    tag: &str,
) -> Result<Run, IndexError> {
    let just: Vec<Session> = sessions.iter().map(|(_, s)| s.clone()).collect();
    let vectors = embedder.embed_sessions(&just).map_err(|source| IndexError::Embed {
        pid: "<session>".into(),
        source,
    })?;
    let results = vectors
        .iter()
        .map(|v| index.search_topk(v, k))
        .collect::<Result<Vec<SearchResult>, _>>()?;
    Ok(run_from_results(
        sessions.iter().map(|(q, _)| q.as_str()).zip(results.iter()),
        tag,
    ))
}

pub fn dataset_sessions(dataset: &ConversationalDataset, input: SessionInput) -> Vec<(String, Session)> {
    dataset
        .sessions()
        .into_iter()
        .map(|(qid, s)| match input {
            SessionInput::Full => (qid, s),
            SessionInput::QueryOnly => {
                let q = s.current_query().to_string();
                (qid.clone(), Session::single(qid, q))
            }
        })
        .collect()
}

/// Retrieves every turn of `dataset` and scores the run against `qrels`.
pub fn evaluate_dataset(
    embedder: &dyn TextEmbedder,
    index: &EmbeddingIndex,
    dataset: &ConversationalDataset,
    qrels: &Qrels,
    input: SessionInput,
    ks: &[usize],
) -> Result<(Run, EvalReport), IndexError> {
    let depth = ks.iter().copied().max().unwrap_or(3).max(1);
    let run = retrieve_sessions(embedder, index, &dataset_sessions(dataset, input), depth, "csit")?;
    let report = evaluate(&run, qrels, ks);
    Ok((run, report))
}
