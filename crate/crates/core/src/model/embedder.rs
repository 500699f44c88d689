//! Session and passage embedders behind one trait.

use sha2::{Digest, Sha256};

use super::{embed_text, embed_texts, ModelError, ModelWeights};
use crate::text::{format_passage, format_session, split_words, Session, TemplateConfig, Vocabulary};

/// Maps sessions and passages into a shared unit-norm vector space.
pub trait TextEmbedder {
    fn dim(&self) -> usize;
    fn embed_session(&self, session: &Session) -> Result<Vec<f64>, ModelError>;
    fn embed_passage(&self, text: &str) -> Result<Vec<f64>, ModelError>;
    fn embed_sessions(&self, sessions: &[Session]) -> Result<Vec<Vec<f64>>, ModelError> {
        sessions.iter().map(|s| self.embed_session(s)).collect()
    }
    fn embed_passages(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, ModelError> {
        texts.iter().map(|t| self.embed_passage(t)).collect()
    }
    /// Stable digest identifying the encoder state.
    fn fingerprint(&self) -> [u8; 32];
}

/// The trained transformer plus the vocabulary it was trained with.
#[derive(Clone, Debug)]
pub struct Retriever {
    pub weights: ModelWeights,
    pub vocab: Vocabulary,
}

impl Retriever {
    pub fn new(weights: ModelWeights, vocab: Vocabulary) -> Result<Self, ModelError> {
        if vocab.size() > weights.config.vocab_size {
            return Err(ModelError::Config(format!(
                "vocabulary of {} ids exceeds model vocab_size {}",
                vocab.size(),
                weights.config.vocab_size
            )));
        }
        Ok(Self { weights, vocab })
    }

    pub fn template(&self) -> TemplateConfig {
        self.weights.config.template()
    }

    pub fn session_tokens(&self, session: &Session) -> Result<Vec<u32>, ModelError> {
        Ok(format_session(session, &self.vocab, &self.template())?)
    }

    pub fn passage_tokens(&self, text: &str) -> Result<Vec<u32>, ModelError> {
        Ok(format_passage(text, &self.vocab, &self.template())?)
    }
}

impl TextEmbedder for Retriever {
    fn dim(&self) -> usize {
        self.weights.config.d_model
    }

    fn embed_session(&self, session: &Session) -> Result<Vec<f64>, ModelError> {
        embed_text(&self.session_tokens(session)?, &self.weights)
    }

    fn embed_passage(&self, text: &str) -> Result<Vec<f64>, ModelError> {
        embed_text(&self.passage_tokens(text)?, &self.weights)
    }

    fn embed_sessions(&self, sessions: &[Session]) -> Result<Vec<Vec<f64>>, ModelError> {
        let tokens = sessions
            .iter()
            .map(|s| self.session_tokens(s))
            .collect::<Result<Vec<_>, _>>()?;
        embed_texts(&tokens, &self.weights)
    }

    fn embed_passages(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, ModelError> {
        let tokens = texts
            .iter()
            .map(|t| self.passage_tokens(t))
            .collect::<Result<Vec<_>, _>>()?;
        embed_texts(&tokens, &self.weights)
    }

    fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.weights.config).expect("config serializes"));
        for t in self.weights.params.iter() {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        for w in self.vocab.words() {
            h.update(w.as_bytes());
            h.update([0]);
        }
        h.finalize().into()
    }
}

/// Hashed bag-of-words embedder. Needs no training, so it can mine hard
/// negatives before the transformer has learned anything.
#[derive(Clone, Debug)]
pub struct LexicalEmbedder {
    pub dim: usize,
}

impl LexicalEmbedder {
    fn embed(&self, texts: &[&str]) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for t in texts {
            for w in split_words(t) {
                if !w.chars().any(char::is_alphanumeric) {
                    continue;
                }
                let d = Sha256::digest(w.as_bytes());
                let bucket = u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) as usize;
                let sign = if d[8] & 1 == 0 { 1.0 } else { -1.0 };
                v[bucket % self.dim] += sign;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        } else {
            v[0] = 1.0;
        }
        v
    }
}

impl TextEmbedder for LexicalEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_session(&self, session: &Session) -> Result<Vec<f64>, ModelError> {
        session.validate()?;
        let texts: Vec<&str> = session.turns.iter().map(|t| t.text.as_str()).collect();
        Ok(self.embed(&texts))
    }

    fn embed_passage(&self, text: &str) -> Result<Vec<f64>, ModelError> {
        Ok(self.embed(&[text]))
    }

    fn fingerprint(&self) -> [u8; 32] {
        Sha256::digest(format!("lexical:{}", self.dim).as_bytes()).into()
    }
}
