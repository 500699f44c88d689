//! Deterministic rewrites of a turn's conversational history that keep the
//! current query fixed.

use rand::Rng;

use super::judge::content_words;
use super::responder::lead_sentence;
use super::{EvalConversation, EvalTurn, RobustError};
use crate::text::{split_words, Session};
use crate::trainer::sub_rng;

const DISTRACTOR_DOMAIN: u64 = 0x4449_5354;

pub const N_VARIANTS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VariantKind {
    Original,
    DropEarliestTurn,
    LeadSentenceResponses,
    RewriteContext,
    DistractorTurn,
}

impl VariantKind {
    pub const ALL: [VariantKind; N_VARIANTS] = [
        VariantKind::Original,
        VariantKind::DropEarliestTurn,
        VariantKind::LeadSentenceResponses,
        VariantKind::RewriteContext,
        VariantKind::DistractorTurn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Original => "original",
            VariantKind::DropEarliestTurn => "drop_earliest_turn",
            VariantKind::LeadSentenceResponses => "lead_sentence_responses",
            VariantKind::RewriteContext => "rewrite_context",
            VariantKind::DistractorTurn => "distractor_turn",
        }
    }
}

/// One history for a fixed query. `collapsed` marks a variant that could not
/// be built and repeats the original history instead.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextVariant {
    pub id: usize,
    pub kind: VariantKind,
    pub history: Vec<(String, String)>,
    pub query: String,
    pub collapsed: bool,
}

impl ContextVariant {
    pub fn session(&self, conv: &EvalConversation, turn: usize) -> Session {
        conv.session_with(turn, &self.history, &self.query)
    }
}

/// Content words of `rewrite` that are absent from `query`, in order of
/// first appearance.
pub fn rewrite_only_words(rewrite: &str, query: &str) -> Vec<String> {
    let in_query = content_words(query);
    let keep = content_words(rewrite);
    let mut out: Vec<String> = Vec::new();
    for w in split_words(rewrite) {
        if keep.contains(&w) && !in_query.contains(&w) && !out.contains(&w) {
            out.push(w);
        }
    }
    out
}

/// The five context variants for turn `turn` of `conv`:
///
/// 0. the original history;
/// 1. the history without its earliest turn;
/// 2. every history response cut to its lead sentence;
/// 3. one synthetic turn naming the words the rewrite adds to the query;
/// 4. the original history with a turn from `pool` inserted before its last turn.
///
/// A turn without history yields five copies of variant 0, all but the first
/// flagged as collapsed. `pool` should hold turns of other conversations; the
/// distractor choice depends only on `(seed, stream)`.
pub fn full_context_variants(
    conv: &EvalConversation,
    turn: usize,
    pool: &[&EvalTurn],
    seed: u64,
    stream: u64,
) -> Result<Vec<ContextVariant>, RobustError> {
    let current = conv.turns.get(turn).ok_or_else(|| {
        RobustError::Contract(format!(
            "{}: turn {turn} out of range",
            conv.conversation_id
        ))
    })?;
    let query = current.query.clone();
    let original: Vec<(String, String)> = conv.turns[..turn]
        .iter()
        .map(|t| (t.query.clone(), t.response.clone()))
        .collect();
    let make = |id: usize, history: Option<Vec<(String, String)>>| {
        let collapsed = history.is_none();
        ContextVariant {
            id,
            kind: VariantKind::ALL[id],
            history: history.unwrap_or_else(|| original.clone()),
            query: query.clone(),
            collapsed,
        }
    };
    if original.is_empty() {
        return Ok((0..N_VARIANTS)
            .map(|id| make(id, (id == 0).then(Vec::new)))
            .collect());
    }

    let dropped = original[1..].to_vec();
    let lead: Vec<(String, String)> = original
        .iter()
        .map(|(q, r)| (q.clone(), lead_sentence(r).to_string()))
        .collect();
    let rewrite = current
        .rewrite
        .as_deref()
        .ok_or_else(|| RobustError::MissingRewrite)?;
    let words = rewrite_only_words(rewrite, &query);
    let synthetic = (!words.is_empty()).then(|| {
        let topic = words.join(" ");
        vec![(
            format!("tell me about {topic}"),
            format!("here is some information on {topic} ."),
        )]
    });
    let distractor = if pool.is_empty() {
        ("can you recommend a good book".to_string(), "many readers enjoy long novels .".to_string())
    } else {
        let pick = pool[sub_rng(seed, DISTRACTOR_DOMAIN, stream).gen_range(0..pool.len())];
        (pick.query.clone(), pick.response.clone())
    };
    let mut injected = original.clone();
    injected.insert(original.len() - 1, distractor);

    Ok(vec![
        make(0, Some(original.clone())),
        make(1, Some(dropped)),
        make(2, Some(lead)),
        make(3, synthetic),
        make(4, Some(injected)),
    ])
}
