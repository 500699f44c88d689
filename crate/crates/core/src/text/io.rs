//! Training-sample JSONL and passage-corpus readers and writers.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde_json::Value;

use super::{Passage, TextError, TrainingSample};

fn read(path: &Path) -> Result<String, TextError> {
    fs::read_to_string(path).map_err(|source| TextError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn require<'a>(obj: &'a Value, field: &str, line: usize) -> Result<&'a Value, TextError> {
    obj.get(field).ok_or_else(|| TextError::Schema {
        line,
        field: field.to_string(),
    })
}

fn from_value<T: serde::de::DeserializeOwned>(
    v: Value,
    what: &str,
    line: usize,
) -> Result<T, TextError> {
    serde_json::from_value(v).map_err(|e| TextError::Parse {
        line,
        message: format!("{what}: {e}"),
    })
}

/// Parses one training record. `line` is 1-based and only used in errors.
pub fn parse_training_record(text: &str, line: usize) -> Result<TrainingSample, TextError> {
    let value: Value = serde_json::from_str(text).map_err(|e| TextError::Parse {
        line,
        message: e.to_string(),
    })?;
    if !value.is_object() {
        return Err(TextError::Parse {
            line,
            message: "record is not a JSON object".into(),
        });
    }
    let conversation_id = require(&value, "conversation_id", line)?;
    let turns = require(&value, "turns", line)?;
    let positive = require(&value, "positive", line)?;
    for field in ["pid", "text"] {
        require(positive, field, line).map_err(|_| TextError::Schema {
            line,
            field: format!("positive.{field}"),
        })?;
    }
    let negatives = value
        .get("hard_negatives")
        .cloned()
        .unwrap_or(Value::Array(Vec::new()));
    let sample = TrainingSample {
        session: crate::text::Session {
            conversation_id: from_value(conversation_id.clone(), "conversation_id", line)?,
            turns: from_value(turns.clone(), "turns", line)?,
        },
        positive: from_value(positive.clone(), "positive", line)?,
        hard_negatives: from_value(negatives, "hard_negatives", line)?,
    };
    sample.validate().map_err(|e| TextError::Invariant {
        line,
        message: e.to_string(),
    })?;
    Ok(sample)
}

/// Reads one training sample per non-blank line. Single-turn records load as
/// one-turn sessions.
pub fn load_training_jsonl(path: &Path) -> Result<Vec<TrainingSample>, TextError> {
    let content = read(path)?;
    content
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_training_record(l, i + 1))
        .collect()
}

pub fn write_training_jsonl(path: &Path, samples: &[TrainingSample]) -> Result<(), TextError> {
    let mut out = Vec::new();
    for s in samples {
        let record = serde_json::json!({
            "conversation_id": s.session.conversation_id,
            "turns": s.session.turns,
            "positive": s.positive,
            "hard_negatives": s.hard_negatives,
        });
        serde_json::to_writer(&mut out, &record).expect("in-memory write");
        out.push(b'\n');
    }
    write_file(path, &out)
}

/// Reads a passage corpus as TSV (`pid<TAB>text`) or JSONL (`{"pid","text"}`),
/// chosen by whether the first non-blank line opens a JSON object.
pub fn load_corpus(path: &Path) -> Result<Vec<Passage>, TextError> {
    let content = read(path)?;
    parse_corpus(&content)
}

pub fn parse_corpus(content: &str) -> Result<Vec<Passage>, TextError> {
    let is_json = content
        .lines()
        .find(|l| !l.trim().is_empty())
        .is_some_and(|l| l.trim_start().starts_with('{'));
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, l) in content.lines().enumerate() {
        if l.trim().is_empty() {
            continue;
        }
        let line = i + 1;
        let p = if is_json {
            let v: Value = serde_json::from_str(l).map_err(|e| TextError::Parse {
                line,
                message: e.to_string(),
            })?;
            require(&v, "pid", line)?;
            require(&v, "text", line)?;
            serde_json::from_value::<Passage>(v).map_err(|e| TextError::Parse {
                line,
                message: e.to_string(),
            })?
        } else {
            let (pid, text) = l.split_once('\t').ok_or_else(|| TextError::Parse {
                line,
                message: "expected pid<TAB>text".into(),
            })?;
            Passage::new(pid.trim(), text.trim_end_matches('\r'))
        };
        if !seen.insert(p.pid.clone()) {
            return Err(TextError::DuplicatePid(p.pid));
        }
        out.push(p);
    }
    Ok(out)
}

pub fn write_corpus_tsv(path: &Path, passages: &[Passage]) -> Result<(), TextError> {
    let mut out = String::new();
    for p in passages {
        out.push_str(&p.pid);
        out.push('\t');
        out.push_str(&p.text.replace(['\t', '\n'], " "));
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), TextError> {
    crate::persist::atomic_write(path, bytes).map_err(|source| TextError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::Role;

    fn record(negs: &[&str]) -> String {
        let negs: Vec<Value> = negs
            .iter()
            .map(|p| serde_json::json!({"pid": p, "text": format!("text of {p}")}))
            .collect();
        serde_json::json!({
            "conversation_id": "c1",
            "turns": [{"role": "user", "text": "what is the cost of tea"}],
            "positive": {"pid": "p0", "text": "tea costs a little"},
            "hard_negatives": negs,
        })
        .to_string()
    }

    #[test]
    fn empty_file_loads_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        fs::write(&path, "").unwrap();
        assert!(load_training_jsonl(&path).unwrap().is_empty());
    }

    #[test]
    fn single_turn_record_with_four_negatives() {
        let s = parse_training_record(&record(&["n1", "n2", "n3", "n4"]), 1).unwrap();
        assert_eq!(s.hard_negatives.len(), 4);
        assert_eq!(s.session.turns.len(), 1);
        assert_eq!(s.session.turns[0].role, Role::User);
    }

    #[test]
    fn positive_among_negatives_is_rejected() {
        let err = parse_training_record(&record(&["n1", "p0"]), 3).unwrap_err();
        assert!(matches!(err, TextError::Invariant { line: 3, .. }));
    }

    #[test]
    fn missing_field_names_field_and_line() {
        let text = r#"{"conversation_id": "c", "turns": [{"role":"user","text":"q"}]}"#;
        match parse_training_record(text, 7).unwrap_err() {
            TextError::Schema { line, field } => {
                assert_eq!(line, 7);
                assert_eq!(field, "positive");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        fs::write(&path, format!("{}\n\nnot json\n", record(&[]))).unwrap();
        assert!(matches!(
            load_training_jsonl(&path),
            Err(TextError::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn corpus_formats_agree() {
        let tsv = "d1\tfirst passage\nd2\tsecond one\n";
        let jsonl = "{\"pid\":\"d1\",\"text\":\"first passage\"}\n{\"pid\":\"d2\",\"text\":\"second one\"}\n";
        let a = parse_corpus(tsv).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a, parse_corpus(jsonl).unwrap());
    }

    #[test]
    fn duplicate_pid_is_named() {
        match parse_corpus("d1\ta\nd1\tb\n").unwrap_err() {
            TextError::DuplicatePid(p) => assert_eq!(p, "d1"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn training_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let s = parse_training_record(&record(&["n1"]), 1).unwrap();
        write_training_jsonl(&path, &[s.clone(), s.clone()]).unwrap();
        assert_eq!(load_training_jsonl(&path).unwrap(), vec![s.clone(), s]);
    }
}
