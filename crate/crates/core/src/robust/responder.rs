//! Response synthesis from retrieved passages.

use super::llm::LlmClient;
use crate::text::Passage;

pub const MAX_RESPONSE_TOKENS: usize = 64;

/// A synthesized response plus whether a configured provider failed and the
/// deterministic fallback was used instead.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Response {
    pub text: String,
    pub fallback: bool,
}

pub trait Responder {
    /// Produces the assistant turn from the top retrieved passages. `gold`
    /// is the dataset's original response, used only by control responders.
    fn respond(&self, query: &str, top: &[Passage], gold: &str) -> Response;
}

/// Text up to and including the first sentence terminator.
pub fn lead_sentence(text: &str) -> &str {
    let bytes = text.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if matches!(b, b'.' | b'!' | b'?') && bytes.get(i + 1).is_none_or(|c| c.is_ascii_whitespace()) {
            return text[..=i].trim();
        }
    }
    text.trim()
}

/// Lead sentence of the top-ranked passage, cut to 64 whitespace tokens.
pub fn synthesize_response(top: &[Passage]) -> String {
    let Some(first) = top.first() else {
        log::warn!("no passages retrieved; synthesizing an empty response");
        return String::new();
    };
    lead_sentence(&first.text)
        .split_whitespace()
        .take(MAX_RESPONSE_TOKENS)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LeadSentenceResponder;

impl Responder for LeadSentenceResponder {
    fn respond(&self, _query: &str, top: &[Passage], _gold: &str) -> Response {
        Response {
            text: synthesize_response(top),
            fallback: false,
        }
    }
}

/// Control condition: always answers with the gold response.
#[derive(Clone, Copy, Debug, Default)]
pub struct GoldResponder;

impl Responder for GoldResponder {
    fn respond(&self, _query: &str, _top: &[Passage], gold: &str) -> Response {
        Response {
            text: gold.to_string(),
            fallback: false,
        }
    }
}

/// Asks an external chat model; falls back to [`synthesize_response`] on any
/// provider failure.
pub struct LlmResponder {
    pub client: LlmClient,
}

impl Responder for LlmResponder {
    fn respond(&self, query: &str, top: &[Passage], _gold: &str) -> Response {
        let prompt = super::llm::response_prompt(query, top);
        match self.client.complete(&prompt) {
            Ok(text) if !text.trim().is_empty() => Response {
                text: text.trim().to_string(),
                fallback: false,
            },
            Ok(_) | Err(_) => {
                log::warn!("response provider unavailable; using the lead-sentence fallback");
                Response {
                    text: synthesize_response(top),
                    fallback: true,
                }
            }
        }
    }
}
