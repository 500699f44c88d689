use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::EvalError;
use crate::index::SearchResult;

/// Graded judgments: `qid → pid → grade`.
pub type Qrels = BTreeMap<String, BTreeMap<String, u32>>;

#[derive(Clone, Debug, PartialEq)]
pub struct RunEntry {
    pub qid: String,
    pub pid: String,
    pub rank: usize,
    pub score: f64,
    pub tag: String,
}

/// Ranked lists per query, each sorted by rank.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Run {
    pub queries: BTreeMap<String, Vec<RunEntry>>,
}

impl Run {
    /// Pids of `qid` in rank order.
    pub fn ranking(&self, qid: &str) -> Vec<&str> {
        self.queries
            .get(qid)
            .map(|v| v.iter().map(|e| e.pid.as_str()).collect())
            .unwrap_or_default()
    }

    /// Checks contiguous ranks from 1 and non-increasing scores.
    pub fn validate(&self) -> Result<(), EvalError> {
        for (qid, entries) in &self.queries {
            let err = |message: String| EvalError::Run {
                qid: qid.clone(),
                message,
            };
            for (i, e) in entries.iter().enumerate() {
                if e.rank != i + 1 {
                    return Err(err(format!("expected rank {}, found {}", i + 1, e.rank)));
                }
            }
            if let Some(w) = entries.windows(2).find(|w| w[1].score > w[0].score) {
                return Err(err(format!(
                    "score rises from {} at rank {} to {} at rank {}",
                    w[0].score, w[0].rank, w[1].score, w[1].rank
                )));
            }
        }
        Ok(())
    }
}

fn fields(line: &str) -> Vec<&str> {
    line.split_whitespace().collect()
}

/// Parses `qid 0 pid grade` lines.
pub fn parse_qrels(text: &str) -> Result<Qrels, EvalError> {
    let mut out = Qrels::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let f = fields(raw);
        if f.is_empty() {
            continue;
        }
        if f.len() != 4 {
            return Err(EvalError::Parse {
                line,
                message: format!("expected 4 fields, found {}", f.len()),
            });
        }
        let grade: i64 = f[3].parse().map_err(|_| EvalError::Parse {
            line,
            message: format!("relevance `{}` is not an integer", f[3]),
        })?;
        let grade = u32::try_from(grade).map_err(|_| EvalError::Parse {
            line,
            message: format!("relevance {grade} is negative"),
        })?;
        out.entry(f[0].to_string())
            .or_default()
            .insert(f[2].to_string(), grade);
    }
    Ok(out)
}

/// Parses `qid Q0 pid rank score tag` lines and validates the result.
pub fn parse_run(text: &str) -> Result<Run, EvalError> {
    let mut run = Run::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let f = fields(raw);
        if f.is_empty() {
            continue;
        }
        if f.len() != 6 {
            return Err(EvalError::Parse {
                line,
                message: format!("expected 6 fields, found {}", f.len()),
            });
        }
        let rank = f[3].parse().map_err(|_| EvalError::Parse {
            line,
            message: format!("rank `{}` is not a positive integer", f[3]),
        })?;
        let score: f64 = f[4].parse().map_err(|_| EvalError::Parse {
            line,
            message: format!("score `{}` is not a number", f[4]),
        })?;
        if !score.is_finite() {
            return Err(EvalError::Parse {
                line,
                message: "score is not finite".into(),
            });
        }
        run.queries.entry(f[0].to_string()).or_default().push(RunEntry {
            qid: f[0].to_string(),
            pid: f[2].to_string(),
            rank,
            score,
            tag: f[5].to_string(),
        });
    }
    for entries in run.queries.values_mut() {
        entries.sort_by_key(|e| e.rank);
    }
    run.validate()?;
    Ok(run)
}

fn read(path: &Path) -> Result<String, EvalError> {
    std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_qrels(path: &Path) -> Result<Qrels, EvalError> {
    parse_qrels(&read(path)?)
}

pub fn load_run(path: &Path) -> Result<Run, EvalError> {
    parse_run(&read(path)?)
}

/// Renders TREC run lines.
pub fn write_run(run: &Run) -> String {
    let mut out = String::new();
    for entries in run.queries.values() {
        for e in entries {
            writeln!(out, "{} Q0 {} {} {} {}", e.qid, e.pid, e.rank, e.score, e.tag)
                .expect("string write");
        }
    }
    out
}

/// Converts search results into a run.
pub fn run_from_results<'a>(
    results: impl IntoIterator<Item = (&'a str, &'a SearchResult)>,
    tag: &str,
) -> Run {
    let mut run = Run::default();
    for (qid, r) in results {
        run.queries.insert(
            qid.to_string(),
            r.hits
                .iter()
                .map(|h| RunEntry {
                    qid: qid.to_string(),
                    pid: h.pid.clone(),
                    rank: h.rank,
                    score: h.score,
                    tag: tag.to_string(),
                })
                .collect(),
        );
    }
    run
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qrels_parse_and_errors() {
        let q = parse_qrels("q1 0 d1 2\n\nq1 0 d2 0\nq2 0 d9 1\n").unwrap();
        assert_eq!(q["q1"]["d1"], 2);
        assert_eq!(q["q1"].len(), 2);
        assert!(matches!(parse_qrels("q1 0 d1\n"), Err(EvalError::Parse { line: 1, .. })));
        assert!(matches!(
            parse_qrels("q1 0 d1 1\nq1 0 d2 -1\n"),
            Err(EvalError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn run_parse_sorts_and_validates() {
        let r = parse_run("q1 Q0 b 2 0.5 t\nq1 Q0 a 1 0.9 t\n").unwrap();
        assert_eq!(r.ranking("q1"), vec!["a", "b"]);
        assert!(matches!(parse_run("q1 Q0 a 1 x t\n"), Err(EvalError::Parse { line: 1, .. })));
        assert!(matches!(parse_run("q1 Q0 a 2 0.9 t\n"), Err(EvalError::Run { .. })));
        assert!(matches!(
            parse_run("q1 Q0 a 1 0.1 t\nq1 Q0 b 2 0.9 t\n"),
            Err(EvalError::Run { .. })
        ));
        let text = write_run(&r);
        assert_eq!(parse_run(&text).unwrap(), r);
    }
}
