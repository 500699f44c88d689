use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use super::{Qrels, Run};

type Judgments = BTreeMap<String, u32>;

fn gain(grade: u32) -> f64 {
    (2f64).powi(grade as i32) - 1.0
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

/// DCG@k over `ranking` divided by the ideal DCG@k. Gain is `2^rel − 1`,
/// unjudged pids count as 0, and a query without positive judgments scores 0.
pub fn ndcg_at_k(ranking: &[&str], judgments: &Judgments, k: usize) -> f64 {
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, pid)| gain(judgments.get(*pid).copied().unwrap_or(0)) * discount(i + 1))
        .sum();
    let mut ideal: Vec<u32> = judgments.values().copied().filter(|&g| g > 0).collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain(g) * discount(i + 1))
        .sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

fn relevant(judgments: &Judgments, pid: &str) -> bool {
    judgments.get(pid).is_some_and(|&g| g >= 1)
}

/// Fraction of relevant pids (grade ≥ 1) found in the top `k`.
pub fn recall_at_k(ranking: &[&str], judgments: &Judgments, k: usize) -> f64 {
    let total = judgments.values().filter(|&&g| g >= 1).count();
    if total == 0 {
        return 0.0;
    }
    let found = ranking
        .iter()
        .take(k)
        .filter(|p| relevant(judgments, p))
        .count();
    found as f64 / total as f64
}

/// Reciprocal rank of the first relevant pid within the top `k`, else 0.
pub fn mrr_at_k(ranking: &[&str], judgments: &Judgments, k: usize) -> f64 {
    ranking
        .iter()
        .take(k)
        .position(|p| relevant(judgments, p))
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueryMetrics {
    pub qid: String,
    /// Metric name (`ndcg@3`, `recall@10`, `mrr@10`, …) to value.
    pub values: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub per_query: Vec<QueryMetrics>,
    pub means: BTreeMap<String, f64>,
    /// Run queries skipped because qrels has no positive judgment for them.
    pub excluded: usize,
}

impl EvalReport {
    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.means.get(metric).copied()
    }

    /// `qid,metric,value` rows, per query then `all` means.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("qid,metric,value\n");
        for q in &self.per_query {
            for (m, v) in &q.values {
                writeln!(out, "{},{m},{v}", q.qid).expect("string write");
            }
        }
        for (m, v) in &self.means {
            writeln!(out, "all,{m},{v}").expect("string write");
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{:<12} {:>10}", "metric", "mean").expect("string write");
        for (m, v) in &self.means {
            writeln!(out, "{m:<12} {v:>10.5}").expect("string write");
        }
        writeln!(
            out,
            "queries evaluated: {}, excluded: {}",
            self.per_query.len(),
            self.excluded
        )
        .expect("string write");
        out
    }
}

/// Per-query NDCG@k, recall@k and MRR@k for every `k` in `ks`, plus macro
/// means over evaluated queries.
pub fn evaluate(run: &Run, qrels: &Qrels, ks: &[usize]) -> EvalReport {
    let mut report = EvalReport::default();
    for qid in run.queries.keys() {
        let Some(j) = qrels.get(qid).filter(|j| j.values().any(|&g| g > 0)) else {
            report.excluded += 1;
            continue;
        };
        let ranking = run.ranking(qid);
        let mut values = BTreeMap::new();
        for &k in ks {
            values.insert(format!("ndcg@{k}"), ndcg_at_k(&ranking, j, k));
            values.insert(format!("recall@{k}"), recall_at_k(&ranking, j, k));
            values.insert(format!("mrr@{k}"), mrr_at_k(&ranking, j, k));
        }
        report.per_query.push(QueryMetrics {
            qid: qid.clone(),
            values,
        });
    }
    if let Some(first) = report.per_query.first() {
        for name in first.values.keys() {
            let sum: f64 = report.per_query.iter().map(|q| q.values[name]).sum();
            report
                .means
                .insert(name.clone(), sum / report.per_query.len() as f64);
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::parse_run;
    use proptest::prelude::*;

    fn judg(pairs: &[(&str, u32)]) -> Judgments {
        pairs.iter().map(|(p, g)| (p.to_string(), *g)).collect()
    }

    #[test]
    fn worked_example() {
        let j = judg(&[("a", 1), ("c", 2)]);
        let v = ndcg_at_k(&["a", "b", "c"], &j, 3);
        let expect = 2.5 / (3.0 + 1.0 / 3f64.log2());
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 0.68853).abs() < 5e-6);
    }

    #[test]
    fn simple_cases() {
        let j = judg(&[("a", 2), ("b", 1)]);
        assert_eq!(ndcg_at_k(&["a", "b", "x"], &j, 3), 1.0);
        assert_eq!(ndcg_at_k(&["x", "y", "z"], &j, 3), 0.0);
        assert_eq!(recall_at_k(&["b", "x", "a"], &j, 3), 1.0);
        assert_eq!(mrr_at_k(&["x", "y", "z", "b"], &j, 10), 0.25);
        assert_eq!(mrr_at_k(&["x", "y", "z", "b"], &j, 3), 0.0);
    }

    #[test]
    fn unjudged_query_excluded_and_counted() {
        let qrels: Qrels = [("q1".to_string(), judg(&[("a", 1)]))].into();
        let one = parse_run("q1 Q0 b 1 2 t\nq1 Q0 a 2 1 t\n").unwrap();
        let r1 = evaluate(&one, &qrels, &[3]);
        assert_eq!(r1.mean("ndcg@3"), Some(r1.per_query[0].values["ndcg@3"]));
        let two = parse_run("q1 Q0 b 1 2 t\nq1 Q0 a 2 1 t\nq9 Q0 a 1 1 t\n").unwrap();
        let r2 = evaluate(&two, &qrels, &[3]);
        assert_eq!(r2.means, r1.means);
        assert_eq!(r2.excluded, r1.excluded + 1);
        assert!(r2.to_csv().contains("all,ndcg@3,"));
    }

    proptest! {
        #[test]
        fn swapping_better_doc_forward_never_hurts(grades in proptest::collection::vec(0u32..4, 2..8), i in 0usize..8, j in 0usize..8) {
            let n = grades.len();
            let (i, j) = (i % n, j % n);
            let (i, j) = (i.min(j), i.max(j));
            let pids: Vec<String> = (0..n).map(|x| format!("d{x}")).collect();
            let jm: Judgments = pids.iter().cloned().zip(grades.iter().copied()).collect();
            let mut ranking: Vec<&str> = pids.iter().map(String::as_str).collect();
            let before = ndcg_at_k(&ranking, &jm, 3);
            if grades[j] > grades[i] {
                ranking.swap(i, j);
                prop_assert!(ndcg_at_k(&ranking, &jm, 3) >= before - 1e-12);
            }
            prop_assert!((0.0..=1.0 + 1e-12).contains(&before));
        }
    }
}
