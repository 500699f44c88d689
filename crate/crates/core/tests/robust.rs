use csit::index::build_index;
use csit::model::LexicalEmbedder;
use csit::robust::{
    full_context_eval, normal_eval, partial_response_eval, robust_csv, GoldResponder,
    HeuristicJudge, LeadSentenceResponder, LlmClient, LlmConfig, LlmResponder, ProtocolConfig,
    Responder, N_VARIANTS, PRIMARY_METRIC,
};
use csit::synthetic::{generate, SyntheticConfig};
use csit::text::Passage;

fn small_task() -> csit::synthetic::SyntheticTask {
    generate(&SyntheticConfig {
        n_entities: 30,
        n_conversations: 30,
        n_heldout: 10,
        n_adhoc: 50,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

#[test]
fn gold_responder_reproduces_normal_evaluation() {
    let task = small_task();
    let emb = LexicalEmbedder { dim: 128 };
    let index = build_index(&task.corpus, &emb).unwrap();
    let cfg = ProtocolConfig::default();
    let out = partial_response_eval(
        &emb, &index, &task.corpus, &task.heldout, &task.qrels, &HeuristicJudge, &GoldResponder, &cfg,
    )
    .unwrap();
    let (normal_run, normal) = normal_eval(&emb, &index, &task.heldout, &task.qrels, &cfg).unwrap();
    assert_eq!(out.substitutions, 0);
    assert_eq!(out.diff(PRIMARY_METRIC), Some(0.0));
    assert_eq!(out.report.means, normal.means);
    for (a, b) in out.run.queries.iter().zip(&normal_run.queries) {
        assert_eq!(a.0, b.0);
        let pa: Vec<&str> = a.1.iter().map(|e| e.pid.as_str()).collect();
        let pb: Vec<&str> = b.1.iter().map(|e| e.pid.as_str()).collect();
        assert_eq!(pa, pb);
    }
}

#[test]
fn synthesized_responses_run_end_to_end() {
    let task = small_task();
    let emb = LexicalEmbedder { dim: 128 };
    let index = build_index(&task.corpus, &emb).unwrap();
    let cfg = ProtocolConfig::default();
    let a = partial_response_eval(
        &emb, &index, &task.corpus, &task.heldout, &task.qrels, &HeuristicJudge,
        &LeadSentenceResponder, &cfg,
    )
    .unwrap();
    let b = partial_response_eval(
        &emb, &index, &task.corpus, &task.heldout, &task.qrels, &HeuristicJudge,
        &LeadSentenceResponder, &cfg,
    )
    .unwrap();
    let n_turns: usize = task.heldout.conversations.iter().map(|c| c.turns.len()).sum();
    assert_eq!(a.run.queries.len(), n_turns);
    assert_eq!(a.report.means, b.report.means);
    assert_eq!(a.fallbacks, 0);
}

#[test]
fn full_context_yields_five_runs_and_csv() {
    let task = small_task();
    let emb = LexicalEmbedder { dim: 128 };
    let index = build_index(&task.corpus, &emb).unwrap();
    let cfg = ProtocolConfig::default();
    let full = full_context_eval(&emb, &index, &task.heldout, &task.qrels, &cfg).unwrap();
    assert_eq!(full.runs.len(), N_VARIANTS);
    let (_, normal) = normal_eval(&emb, &index, &task.heldout, &task.qrels, &cfg).unwrap();
    assert_eq!(full.reports[0].means, normal.means);
    let n_conv = task.heldout.conversations.len();
    assert!(full.collapsed[1..].iter().all(|&c| c >= n_conv));
    let again = full_context_eval(&emb, &index, &task.heldout, &task.qrels, &cfg).unwrap();
    assert_eq!(again.summary, full.summary);
    let csv = robust_csv("synthetic", Some(&normal), None, Some(&full));
    assert!(csv.starts_with("dataset,protocol,variant,metric,value\n"));
    assert!(csv.lines().all(|l| l.split(',').count() == 5));
    assert!(csv.contains("synthetic,full_context,all,sd_ndcg@3,"));
}

#[test]
fn failing_provider_falls_back_and_flags() {
    let client = LlmClient::new(LlmConfig {
        endpoint: "http://127.0.0.1:9/v1/chat/completions".into(),
        timeout_secs: 2,
        max_retries: 0,
        ..LlmConfig::default()
    })
    .unwrap();
    let responder = LlmResponder { client };
    let top = [Passage::new("p", "the color of bax is red . more")];
    let r = responder.respond("what color", &top, "");
    assert!(r.fallback);
    assert_eq!(r.text, "the color of bax is red .");
}
