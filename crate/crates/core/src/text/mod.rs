//! Conversation and corpus data model, tokenizer, chat rendering and packed
//! training sequences.

mod format;
mod io;
mod types;
mod vocab;

pub use format::{
    format_passage, format_session, pack_session_response, pack_training_sequence,
    PackedSequence, Segment, TemplateConfig, DEFAULT_MAX_SEQ_LEN, DEFAULT_T_SPECIAL,
};
pub use io::{
    load_corpus, load_training_jsonl, parse_corpus, parse_training_record, write_corpus_tsv,
    write_training_jsonl,
};
pub use types::{Passage, Role, Session, TrainingSample, Turn};
pub use vocab::{
    emb_id, is_special, split_words, Vocabulary, ASSISTANT, FIRST_WORD_ID, MAX_SPECIAL, PAD, SEP,
    UNK, USER,
};

#[derive(Debug, thiserror::Error)]
pub enum TextError {
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("sample rejected: {0}")]
    SampleRejected(String),
    #[error("line {line}: missing required field `{field}`")]
    Schema { line: usize, field: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: invariant violated: {message}")]
    Invariant { line: usize, message: String },
    #[error("duplicate passage id `{0}`")]
    DuplicatePid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
