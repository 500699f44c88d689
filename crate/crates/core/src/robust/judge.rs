//! Whether a query still reads naturally after its context changed.

use std::cell::Cell;
use std::collections::BTreeSet;

use super::llm::{judge_prompt, parse_yes_no, LlmClient};
use super::RobustError;
use crate::text::split_words;

/// Words whose presence means the query leans on earlier context.
pub const ANAPHORA: [&str; 9] = ["it", "they", "this", "that", "these", "those", "he", "she", "one"];
/// Possessive forms counted as their base pronoun.
const POSSESSIVES: [&str; 4] = ["its", "their", "his", "her"];

pub const OVERLAP_THRESHOLD: f64 = 0.3;

const STOPWORDS: [&str; 48] = [
    "a", "an", "the", "of", "to", "in", "on", "at", "for", "by", "with", "from", "and", "or",
    "but", "is", "are", "was", "were", "be", "been", "it", "its", "this", "that", "these",
    "those", "they", "their", "he", "she", "his", "her", "what", "which", "who", "how", "about",
    "me", "tell", "i", "you", "do", "does", "can", "as", "so", "not",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JudgeVerdict {
    pub reasonable: bool,
    /// The human rewrite, present exactly when `reasonable` is false.
    pub substituted_query: Option<String>,
}

/// Lowercased alphanumeric words minus stopwords.
pub fn content_words(text: &str) -> BTreeSet<String> {
    split_words(text)
        .into_iter()
        .filter(|w| w.chars().any(char::is_alphanumeric) && !STOPWORDS.contains(&w.as_str()))
        .collect()
}

pub fn has_anaphora(query: &str) -> bool {
    split_words(query)
        .iter()
        .any(|w| ANAPHORA.contains(&w.as_str()) || POSSESSIVES.contains(&w.as_str()))
}

/// Share of the original response's content words kept by the new one. An
/// original without content words counts as fully kept.
pub fn content_overlap(original: &str, synthesized: &str) -> f64 {
    let orig = content_words(original);
    if orig.is_empty() {
        return 1.0;
    }
    let synth = content_words(synthesized);
    orig.intersection(&synth).count() as f64 / orig.len() as f64
}

pub trait Judge {
    /// Judges `query` after the previous response was replaced by
    /// `new_context`. `rewrite` is substituted when the query no longer fits.
    fn judge(
        &self,
        query: &str,
        new_context: &str,
        original_response: &str,
        rewrite: Option<&str>,
    ) -> Result<JudgeVerdict, RobustError>;
}

/// Unreasonable iff the query has an anaphoric marker and the new context
/// keeps less than [`OVERLAP_THRESHOLD`] of the original content words.
#[derive(Clone, Copy, Debug, Default)]
pub struct HeuristicJudge;

impl Judge for HeuristicJudge {
    fn judge(
        &self,
        query: &str,
        new_context: &str,
        original_response: &str,
        rewrite: Option<&str>,
    ) -> Result<JudgeVerdict, RobustError> {
        judge_query_reasonable(query, new_context, original_response, rewrite)
    }
}

/// Asks an external chat model; uses [`HeuristicJudge`] whenever the
/// provider fails or replies with something other than yes or no.
pub struct LlmJudge {
    pub client: LlmClient,
    fallbacks: Cell<usize>,
}

impl LlmJudge {
    pub fn new(client: LlmClient) -> Self {
        Self {
            client,
            fallbacks: Cell::new(0),
        }
    }

    /// Verdicts that came from the heuristic fallback.
    pub fn fallbacks(&self) -> usize {
        self.fallbacks.get()
    }
}

impl Judge for LlmJudge {
    fn judge(
        &self,
        query: &str,
        new_context: &str,
        original_response: &str,
        rewrite: Option<&str>,
    ) -> Result<JudgeVerdict, RobustError> {
        let reply = self.client.complete(&judge_prompt(query, new_context));
        match reply.ok().as_deref().and_then(parse_yes_no) {
            Some(reasonable) => verdict(reasonable, rewrite),
            None => {
                log::warn!("judge provider unavailable; using the heuristic judge");
                self.fallbacks.set(self.fallbacks.get() + 1);
                judge_query_reasonable(query, new_context, original_response, rewrite)
            }
        }
    }
}

pub fn judge_query_reasonable(
    query: &str,
    new_context: &str,
    original_response: &str,
    rewrite: Option<&str>,
) -> Result<JudgeVerdict, RobustError> {
    let reasonable = !has_anaphora(query)
        || content_overlap(original_response, new_context) >= OVERLAP_THRESHOLD;
    verdict(reasonable, rewrite)
}

pub(crate) fn verdict(reasonable: bool, rewrite: Option<&str>) -> Result<JudgeVerdict, RobustError> {
    if reasonable {
        return Ok(JudgeVerdict {
            reasonable,
            substituted_query: None,
        });
    }
    let rewrite = rewrite.ok_or(RobustError::MissingRewrite)?;
    Ok(JudgeVerdict {
        reasonable,
        substituted_query: Some(rewrite.to_string()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_anaphora_is_always_reasonable() {
        let v = judge_query_reasonable("what is the price of tea", "", "tea costs two", None).unwrap();
        assert!(v.reasonable);
        assert_eq!(v.substituted_query, None);
    }

    #[test]
    fn dangling_pronoun_gets_rewrite() {
        let v = judge_query_reasonable(
            "what about its cost",
            "rome was founded long ago",
            "green tea comes from china",
            Some("what about the cost of green tea"),
        )
        .unwrap();
        assert!(!v.reasonable);
        assert_eq!(v.substituted_query.as_deref(), Some("what about the cost of green tea"));
    }

    #[test]
    fn identical_context_is_reasonable() {
        let r = "green tea comes from china";
        assert!(judge_query_reasonable("what about its cost", r, r, None).unwrap().reasonable);
    }

    #[test]
    fn missing_rewrite_is_an_error() {
        assert!(matches!(
            judge_query_reasonable("and that one", "x y z", "green tea", None),
            Err(RobustError::MissingRewrite)
        ));
    }

    #[test]
    fn overlap_counts_content_words() {
        assert_eq!(content_overlap("the green tea", "green coffee"), 0.5);
        assert_eq!(content_overlap("the of", "anything"), 1.0);
    }
}
