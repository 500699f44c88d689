//! Evaluation under modified conversational context.

use std::collections::HashMap;

use super::judge::Judge;
use super::responder::Responder;
use super::variants::{full_context_variants, N_VARIANTS};
use super::{ConversationalDataset, EvalTurn, RobustError};
use crate::eval::{evaluate, EvalReport, Qrels, Run};
use crate::index::EmbeddingIndex;
use crate::model::TextEmbedder;
use crate::pipeline::{dataset_sessions, retrieve_sessions, SessionInput};
use crate::text::{Passage, Session};

/// Metric every protocol summarizes.
pub const PRIMARY_METRIC: &str = "ndcg@3";

#[derive(Clone, Debug)]
pub struct ProtocolConfig {
    pub ks: Vec<usize>,
    /// Passages handed to the responder.
    pub response_passages: usize,
    /// Seed for distractor selection.
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            ks: vec![3],
            response_passages: 3,
            seed: 0,
        }
    }
}

impl ProtocolConfig {
    fn depth(&self) -> usize {
        self.ks.iter().copied().max().unwrap_or(3).max(self.response_passages).max(1)
    }
}

/// Population mean and standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RobustSummary {
    pub mean: f64,
    pub sd: f64,
}

pub fn robust_report(values: &[f64]) -> Result<RobustSummary, RobustError> {
    if values.len() < 2 {
        return Err(RobustError::Contract(format!(
            "need at least two variant scores, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(RobustSummary {
        mean,
        sd: var.sqrt(),
    })
}

#[derive(Clone, Debug)]
pub struct PartialResponseOutcome {
    pub run: Run,
    pub report: EvalReport,
    pub reference: EvalReport,
    /// Queries replaced by their rewrite.
    pub substitutions: usize,
    /// Responses produced by the fallback after a provider failure.
    pub fallbacks: usize,
}

impl PartialResponseOutcome {
    /// Absolute gap between the modified and unmodified means of `metric`.
    pub fn diff(&self, metric: &str) -> Option<f64> {
        Some((self.report.mean(metric)? - self.reference.mean(metric)?).abs())
    }
}

#[derive(Clone, Debug)]
pub struct FullContextOutcome {
    pub runs: Vec<Run>,
    pub reports: Vec<EvalReport>,
    /// Per variant, the number of turns that fell back to the original history.
    pub collapsed: Vec<usize>,
    pub summary: RobustSummary,
}

/// Unmodified evaluation: gold history plus the query.
pub fn normal_eval(
    embedder: &dyn TextEmbedder,
    index: &EmbeddingIndex,
    dataset: &ConversationalDataset,
    qrels: &Qrels,
    cfg: &ProtocolConfig,
) -> Result<(Run, EvalReport), RobustError> {
    let sessions = dataset_sessions(dataset, SessionInput::Full);
    let run = retrieve_sessions(embedder, index, &sessions, cfg.depth(), "normal")?;
    let report = evaluate(&run, qrels, &cfg.ks);
    Ok((run, report))
}

/// Replays each conversation turn by turn, replacing every history response
/// with one synthesized from the passages retrieved for that turn. Before
/// each follow-up, `judge` decides whether the query still fits the new
/// history and substitutes its rewrite when it does not.
pub fn partial_response_eval(
    embedder: &dyn TextEmbedder,
    index: &EmbeddingIndex,
    corpus: &[Passage],
    dataset: &ConversationalDataset,
    qrels: &Qrels,
    judge: &dyn Judge,
    responder: &dyn Responder,
    cfg: &ProtocolConfig,
) -> Result<PartialResponseOutcome, RobustError> {
    let by_pid: HashMap<&str, &Passage> = corpus.iter().map(|p| (p.pid.as_str(), p)).collect();
    let convs = &dataset.conversations;
    let mut histories: Vec<Vec<(String, String)>> = vec![Vec::new(); convs.len()];
    let mut run = Run::default();
    let mut substitutions = 0;
    let mut fallbacks = 0;
    let max_turns = convs.iter().map(|c| c.turns.len()).max().unwrap_or(0);

    for turn in 0..max_turns {
        let mut active: Vec<(usize, String, Session)> = Vec::new();
        for (ci, conv) in convs.iter().enumerate() {
            let Some(current) = conv.turns.get(turn) else { continue };
            let mut query = current.query.clone();
            if turn > 0 {
                let synthesized = &histories[ci][turn - 1].1;
                let gold = &conv.turns[turn - 1].response;
                let verdict = judge
                    .judge(&query, synthesized, gold, current.rewrite.as_deref())
                    .map_err(|e| match e {
                        RobustError::MissingRewrite => RobustError::Contract(format!(
                            "{}: query needs its rewrite but none is provided",
                            conv.qid(turn)
                        )),
                        other => other,
                    })?;
                if let Some(rewrite) = verdict.substituted_query {
                    substitutions += 1;
                    query = rewrite;
                }
            }
            let session = conv.session_with(turn, &histories[ci], &query);
            active.push((ci, query, session));
        }
        let sessions: Vec<(String, Session)> = active
            .iter()
            .map(|(ci, _, s)| (convs[*ci].qid(turn), s.clone()))
            .collect();
        let turn_run = retrieve_sessions(embedder, index, &sessions, cfg.depth(), "partial")?;
        for (ci, query, _) in active {
            let qid = convs[ci].qid(turn);
            let top: Vec<Passage> = turn_run
                .ranking(&qid)
                .into_iter()
                .take(cfg.response_passages)
                .filter_map(|pid| by_pid.get(pid).map(|p| (*p).clone()))
                .collect();
            let response = responder.respond(&query, &top, &convs[ci].turns[turn].response);
            fallbacks += usize::from(response.fallback);
            histories[ci].push((query, response.text));
        }
        run.queries.extend(turn_run.queries);
    }

    let report = evaluate(&run, qrels, &cfg.ks);
    let (_, reference) = normal_eval(embedder, index, dataset, qrels, cfg)?;
    Ok(PartialResponseOutcome {
        run,
        report,
        reference,
        substitutions,
        fallbacks,
    })
}

/// Evaluates every turn under each of the five context variants and
/// summarizes the spread of the primary metric across variants.
pub fn full_context_eval(
    embedder: &dyn TextEmbedder,
    index: &EmbeddingIndex,
    dataset: &ConversationalDataset,
    qrels: &Qrels,
    cfg: &ProtocolConfig,
) -> Result<FullContextOutcome, RobustError> {
    let mut per_variant: Vec<Vec<(String, Session)>> = vec![Vec::new(); N_VARIANTS];
    let mut collapsed = vec![0usize; N_VARIANTS];
    let mut stream = 0u64;
    for (ci, conv) in dataset.conversations.iter().enumerate() {
        let pool: Vec<&EvalTurn> = dataset
            .conversations
            .iter()
            .enumerate()
            .filter(|(cj, _)| *cj != ci)
            .flat_map(|(_, c)| c.turns.iter())
            .collect();
        for turn in 0..conv.turns.len() {
            let variants = full_context_variants(conv, turn, &pool, cfg.seed, stream)?;
            stream += 1;
            for v in variants {
                collapsed[v.id] += usize::from(v.collapsed);
                per_variant[v.id].push((conv.qid(turn), v.session(conv, turn)));
            }
        }
    }
    let mut runs = Vec::with_capacity(N_VARIANTS);
    let mut reports = Vec::with_capacity(N_VARIANTS);
    for (id, sessions) in per_variant.iter().enumerate() {
        let run = retrieve_sessions(embedder, index, sessions, cfg.depth(), &format!("variant{id}"))?;
        reports.push(evaluate(&run, qrels, &cfg.ks));
        runs.push(run);
    }
    let primary: Vec<f64> = reports
        .iter()
        .map(|r| r.mean(PRIMARY_METRIC).unwrap_or(0.0))
        .collect();
    let summary = robust_report(&primary)?;
    Ok(FullContextOutcome {
        runs,
        reports,
        collapsed,
        summary,
    })
}

/// Human-readable summary of the primary metric per protocol.
pub fn robust_table(
    dataset: &str,
    normal: Option<&EvalReport>,
    partial: Option<&PartialResponseOutcome>,
    full: Option<&FullContextOutcome>,
) -> String {
    let mut out = format!("{:<12} {:<18} {:>10} {:>10}\n", "dataset", "protocol", PRIMARY_METRIC, "diff/sd");
    let score = |r: &EvalReport| r.mean(PRIMARY_METRIC).unwrap_or(0.0);
    if let Some(r) = normal {
        out.push_str(&format!("{dataset:<12} {:<18} {:>10.4} {:>10}\n", "normal", score(r), "-"));
    }
    if let Some(p) = partial {
        let diff = p.diff(PRIMARY_METRIC).unwrap_or(0.0);
        out.push_str(&format!(
            "{dataset:<12} {:<18} {:>10.4} {:>10.4}\n",
            "partial_response",
            score(&p.report),
            diff
        ));
    }
    if let Some(f) = full {
        out.push_str(&format!(
            "{dataset:<12} {:<18} {:>10.4} {:>10.4}\n",
            "full_context", f.summary.mean, f.summary.sd
        ));
    }
    out
}

/// `dataset,protocol,variant,metric,value` rows for whichever protocols ran.
pub fn robust_csv(
    dataset: &str,
    normal: Option<&EvalReport>,
    partial: Option<&PartialResponseOutcome>,
    full: Option<&FullContextOutcome>,
) -> String {
    let mut out = String::from("dataset,protocol,variant,metric,value\n");
    let mut row = |protocol: &str, variant: &str, metric: &str, value: f64| {
        out.push_str(&format!("{dataset},{protocol},{variant},{metric},{value:.6}\n"));
    };
    if let Some(r) = normal {
        for (m, v) in &r.means {
            row("normal", "-", m, *v);
        }
    }
    if let Some(p) = partial {
        for (m, v) in &p.report.means {
            row("partial_response", "-", m, *v);
            if let Some(d) = p.diff(m) {
                row("partial_response", "-", &format!("diff_{m}"), d);
            }
        }
        row("partial_response", "-", "substitutions", p.substitutions as f64);
        row("partial_response", "-", "fallbacks", p.fallbacks as f64);
    }
    if let Some(f) = full {
        for (id, r) in f.reports.iter().enumerate() {
            for (m, v) in &r.means {
                row("full_context", &id.to_string(), m, *v);
            }
            row("full_context", &id.to_string(), "collapsed", f.collapsed[id] as f64);
        }
        row("full_context", "all", &format!("mean_{PRIMARY_METRIC}"), f.summary.mean);
        row("full_context", "all", &format!("sd_{PRIMARY_METRIC}"), f.summary.sd);
    }
    out
}
