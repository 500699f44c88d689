//! Multi-turn evaluation conversations with gold responses and human
//! rewrites.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RobustError;
use crate::text::{Session, Turn};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalTurn {
    pub query: String,
    /// Gold assistant response shown as history for later turns.
    pub response: String,
    /// Standalone reformulation of `query`.
    #[serde(default)]
    pub rewrite: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConversation {
    pub conversation_id: String,
    pub turns: Vec<EvalTurn>,
}

impl EvalConversation {
    /// Query id of turn `i` (0-based), as used in qrels and runs.
    pub fn qid(&self, i: usize) -> String {
        format!("{}_{}", self.conversation_id, i + 1)
    }

    /// Session for turn `i` built from `history` (earlier queries paired with
    /// the given responses) and the current query.
    pub fn session_with(&self, i: usize, history: &[(String, String)], query: &str) -> Session {
        let mut turns = Vec::with_capacity(2 * history.len() + 1);
        for (q, r) in history {
            turns.push(Turn::user(q.clone()));
            if !r.is_empty() {
                turns.push(Turn::assistant(r.clone()));
            }
        }
        turns.push(Turn::user(query));
        Session {
            conversation_id: self.qid(i),
            turns,
        }
    }

    /// The unmodified session for turn `i`: gold history plus the query.
    pub fn session_at(&self, i: usize) -> Session {
        let history: Vec<(String, String)> = self.turns[..i]
            .iter()
            .map(|t| (t.query.clone(), t.response.clone()))
            .collect();
        self.session_with(i, &history, &self.turns[i].query)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConversationalDataset {
    pub name: String,
    pub conversations: Vec<EvalConversation>,
}

impl ConversationalDataset {
    /// `(qid, session)` for every turn under normal evaluation.
    pub fn sessions(&self) -> Vec<(String, Session)> {
        self.conversations
            .iter()
            .flat_map(|c| (0..c.turns.len()).map(move |i| (c.qid(i), c.session_at(i))))
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for c in &self.conversations {
            out.push_str(&serde_json::to_string(c).expect("serializes"));
            out.push('\n');
        }
        out
    }

    pub fn parse_jsonl(name: &str, text: &str) -> Result<Self, RobustError> {
        let mut conversations = Vec::new();
        for (i, l) in text.lines().enumerate() {
            if l.trim().is_empty() {
                continue;
            }
            let c: EvalConversation = serde_json::from_str(l).map_err(|e| RobustError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            if c.turns.is_empty() {
                return Err(RobustError::Parse {
                    line: i + 1,
                    message: format!("conversation {} has no turns", c.conversation_id),
                });
            }
            conversations.push(c);
        }
        Ok(Self {
            name: name.to_string(),
            conversations,
        })
    }

    /// Loads a JSONL file; the dataset name is the file stem.
    pub fn load(path: &Path) -> Result<Self, RobustError> {
        let text = std::fs::read_to_string(path).map_err(|source| RobustError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into());
        Self::parse_jsonl(&name, &text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::Role;

    fn conv() -> EvalConversation {
        EvalConversation {
            conversation_id: "c7".into(),
            turns: vec![
                EvalTurn {
                    query: "tell me about tea".into(),
                    response: "tea is a drink .".into(),
                    rewrite: None,
                },
                EvalTurn {
                    query: "what about its cost".into(),
                    response: "it is cheap .".into(),
                    rewrite: Some("what about the cost of tea".into()),
                },
            ],
        }
    }

    #[test]
    fn sessions_follow_gold_history() {
        let c = conv();
        let s = c.session_at(1);
        assert_eq!(s.conversation_id, "c7_2");
        assert_eq!(s.turns.len(), 3);
        assert_eq!(s.turns[1].role, Role::Assistant);
        assert_eq!(s.current_query(), "what about its cost");
        assert_eq!(c.session_at(0).turns.len(), 1);
    }

    #[test]
    fn jsonl_round_trip() {
        let d = ConversationalDataset {
            name: "x".into(),
            conversations: vec![conv()],
        };
        assert_eq!(ConversationalDataset::parse_jsonl("x", &d.to_jsonl()).unwrap(), d);
        assert!(matches!(
            ConversationalDataset::parse_jsonl("x", "{}\n"),
            Err(RobustError::Parse { line: 1, .. })
        ));
    }
}
