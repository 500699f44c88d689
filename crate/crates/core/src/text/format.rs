//! Role-tagged chat rendering with trailing embedding tokens, and the packed
//! session/response sequence used by the session-masked LM objective.

use serde::{Deserialize, Serialize};

use super::vocab::{emb_id, Vocabulary, ASSISTANT, MAX_SPECIAL, SEP, USER};
use super::{Passage, Role, Session, TextError, TrainingSample};

/// Paper-scale input length limit.
pub const DEFAULT_MAX_SEQ_LEN: usize = 1024;
pub const DEFAULT_T_SPECIAL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateConfig {
    /// Number of trailing `[EMB_i]` tokens.
    pub t_special: usize,
    pub max_seq_len: usize,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        Self {
            t_special: DEFAULT_T_SPECIAL,
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
        }
    }
}

impl TemplateConfig {
    pub fn validate(&self) -> Result<(), TextError> {
        if !(1..=MAX_SPECIAL).contains(&self.t_special) {
            return Err(TextError::Config(format!(
                "t_special must be in 1..={MAX_SPECIAL}, got {}",
                self.t_special
            )));
        }
        if self.max_seq_len < 2 * self.t_special + 2 {
            return Err(TextError::Config(format!(
                "max_seq_len {} too small for {} special tokens",
                self.max_seq_len, self.t_special
            )));
        }
        Ok(())
    }

    pub fn specials(&self) -> impl Iterator<Item = u32> {
        (1..=self.t_special).map(emb_id)
    }
}

fn render_turn(role: Role, text: &str, vocab: &Vocabulary) -> Vec<u32> {
    let marker = match role {
        Role::User => USER,
        Role::Assistant => ASSISTANT,
    };
    let mut out = vec![marker];
    out.extend(vocab.tokenize(text));
    out.push(SEP);
    out
}

/// Renders the turns of `session` within `budget` tokens: whole oldest turns
/// are dropped first, then the remainder is cut from the left. The final
/// user turn is never dropped.
fn render_session_body(session: &Session, vocab: &Vocabulary, budget: usize) -> Vec<u32> {
    let rendered: Vec<Vec<u32>> = session
        .turns
        .iter()
        .map(|t| render_turn(t.role, &t.text, vocab))
        .collect();
    let mut start = 0;
    let mut total: usize = rendered.iter().map(Vec::len).sum();
    while total > budget && start + 1 < rendered.len() {
        total -= rendered[start].len();
        start += 1;
    }
    let mut body: Vec<u32> = rendered[start..].concat();
    if body.len() > budget {
        body.drain(..body.len() - budget);
    }
    body
}

/// `[role, tokens…, SEP]` per turn followed by `[EMB_1]…[EMB_t]`, truncated
/// to `max_seq_len`.
pub fn format_session(
    session: &Session,
    vocab: &Vocabulary,
    cfg: &TemplateConfig,
) -> Result<Vec<u32>, TextError> {
    cfg.validate()?;
    session.validate()?;
    let mut out = render_session_body(session, vocab, cfg.max_seq_len - cfg.t_special);
    out.extend(cfg.specials());
    Ok(out)
}

/// Passages share the response template: text tokens plus trailing specials.
pub fn format_passage(
    text: &str,
    vocab: &Vocabulary,
    cfg: &TemplateConfig,
) -> Result<Vec<u32>, TextError> {
    cfg.validate()?;
    let mut out = vocab.tokenize(text);
    out.truncate(cfg.max_seq_len - cfg.t_special);
    out.extend(cfg.specials());
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Segment {
    Session,
    SessionSpecial,
    Response,
    ResponseSpecial,
}

/// `[x_1..x_N, EMB_1..EMB_t, y_1..y_M, EMB_1..EMB_t]` with per-position labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedSequence {
    token_ids: Vec<u32>,
    segments: Vec<Segment>,
    n_session: usize,
    n_response: usize,
    t_special: usize,
}

impl PackedSequence {
    /// Assembles a packed sequence from already-rendered parts.
    pub fn from_parts(session: &[u32], response: &[u32], t_special: usize) -> Self {
        let specials: Vec<u32> = (1..=t_special).map(emb_id).collect();
        let (n, m, t) = (session.len(), response.len(), t_special);
        let mut token_ids = Vec::with_capacity(n + m + 2 * t);
        token_ids.extend_from_slice(session);
        token_ids.extend_from_slice(&specials);
        token_ids.extend_from_slice(response);
        token_ids.extend_from_slice(&specials);
        let segments = std::iter::repeat(Segment::Session)
            .take(n)
            .chain(std::iter::repeat(Segment::SessionSpecial).take(t))
            .chain(std::iter::repeat(Segment::Response).take(m))
            .chain(std::iter::repeat(Segment::ResponseSpecial).take(t))
            .collect();
        Self {
            token_ids,
            segments,
            n_session: n,
            n_response: m,
            t_special: t,
        }
    }

    pub fn token_ids(&self) -> &[u32] {
        &self.token_ids
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// N, the number of ordinary session tokens.
    pub fn n_session(&self) -> usize {
        self.n_session
    }

    /// M, the number of ordinary response tokens.
    pub fn n_response(&self) -> usize {
        self.n_response
    }

    pub fn t_special(&self) -> usize {
        self.t_special
    }

    /// Positions of the session special tokens, `N..N+t`.
    pub fn session_special_range(&self) -> std::ops::Range<usize> {
        self.n_session..self.n_session + self.t_special
    }

    /// Positions of the response region (response tokens and its specials).
    pub fn response_region(&self) -> std::ops::Range<usize> {
        self.n_session + self.t_special..self.len()
    }

    /// Response tokens `y_1..y_M`.
    pub fn response_tokens(&self) -> &[u32] {
        let s = self.n_session + self.t_special;
        &self.token_ids[s..s + self.n_response]
    }

    /// The session prefix `[x_1..x_N, EMB_1..EMB_t]`, identical to the
    /// formatted session input.
    pub fn session_prefix(&self) -> &[u32] {
        &self.token_ids[..self.n_session + self.t_special]
    }
}

/// Packs a training sample for the session-masked LM objective. Over-long
/// samples lose session tokens first; a response that cannot fit next to at
/// least one session token rejects the sample.
pub fn pack_training_sequence(
    sample: &TrainingSample,
    vocab: &Vocabulary,
    cfg: &TemplateConfig,
) -> Result<PackedSequence, TextError> {
    cfg.validate()?;
    sample.validate()?;
    let response = vocab.tokenize(&sample.positive.text);
    let fixed = response.len() + 2 * cfg.t_special;
    if fixed + 1 > cfg.max_seq_len {
        return Err(TextError::SampleRejected(format!(
            "response of {} tokens leaves no room for the session within {}",
            response.len(),
            cfg.max_seq_len
        )));
    }
    let session = render_session_body(&sample.session, vocab, cfg.max_seq_len - fixed);
    Ok(PackedSequence::from_parts(&session, &response, cfg.t_special))
}

/// Convenience for a passage-shaped response.
pub fn pack_session_response(
    session: &Session,
    response: &Passage,
    vocab: &Vocabulary,
    cfg: &TemplateConfig,
) -> Result<PackedSequence, TextError> {
    let sample = TrainingSample {
        session: session.clone(),
        positive: response.clone(),
        hard_negatives: Vec::new(),
    };
    pack_training_sequence(&sample, vocab, cfg)
}
