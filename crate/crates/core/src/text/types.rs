use serde::{Deserialize, Serialize};

use super::TextError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

impl Turn {
    pub fn user(text: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            text: text.into(),
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            text: text.into(),
        }
    }
}

/// Conversation history plus the current user query as its final turn.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub conversation_id: String,
    pub turns: Vec<Turn>,
}

impl Session {
    pub fn new(conversation_id: impl Into<String>, turns: Vec<Turn>) -> Result<Self, TextError> {
        let s = Self {
            conversation_id: conversation_id.into(),
            turns,
        };
        s.validate()?;
        Ok(s)
    }

    /// A one-turn session holding only `query`.
    pub fn single(conversation_id: impl Into<String>, query: impl Into<String>) -> Self {
        Self {
            conversation_id: conversation_id.into(),
            turns: vec![Turn::user(query)],
        }
    }

    pub fn validate(&self) -> Result<(), TextError> {
        let last = self
            .turns
            .last()
            .ok_or_else(|| TextError::Contract("session has no turns".into()))?;
        if last.role != Role::User {
            return Err(TextError::Contract(
                "session must end with a user turn".into(),
            ));
        }
        if let Some(i) = self.turns.iter().position(|t| t.text.trim().is_empty()) {
            return Err(TextError::Contract(format!("turn {i} has empty text")));
        }
        Ok(())
    }

    /// The final user turn.
    pub fn current_query(&self) -> &str {
        &self.turns.last().expect("validated session").text
    }

    pub fn history(&self) -> &[Turn] {
        &self.turns[..self.turns.len().saturating_sub(1)]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub pid: String,
    pub text: String,
}

impl Passage {
    pub fn new(pid: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            pid: pid.into(),
            text: text.into(),
        }
    }
}

/// A session, its relevant response, and mined hard negatives.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub session: Session,
    pub positive: Passage,
    pub hard_negatives: Vec<Passage>,
}

impl TrainingSample {
    pub fn validate(&self) -> Result<(), TextError> {
        self.session.validate()?;
        if self.positive.text.trim().is_empty() {
            return Err(TextError::Contract("positive has empty text".into()));
        }
        if self
            .hard_negatives
            .iter()
            .any(|n| n.pid == self.positive.pid)
        {
            return Err(TextError::Contract(format!(
                "positive pid {} appears among hard negatives",
                self.positive.pid
            )));
        }
        Ok(())
    }
}
