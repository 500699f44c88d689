//! Self-check suites run by the `verify` command: a finite-difference
//! gradient check of the combined loss, attention-mask zeroing, agreement
//! with the two-pass language-model oracle, and brute-force metric oracles.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::eval::{mrr_at_k, ndcg_at_k, recall_at_k};
use crate::model::{bind_params, build_session_mask, forward, AttentionMask, ModelConfig, ModelWeights};
use crate::numeric::{finite_difference_gradient, relative_error, Graph};
use crate::objectives::{
    micro_batch_loss, session_masked_lm_loss, two_pass_lm_loss_oracle, LmMask, ObjectiveConfig,
    PreparedBatch, PreparedSample,
};
use crate::text::{
    Passage, PackedSequence, Session, TemplateConfig, TrainingSample, Turn, Vocabulary,
    FIRST_WORD_ID,
};

/// Builds the attention mask for a packed training sequence.
pub type MaskBuilder = fn(&PackedSequence) -> AttentionMask;

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    pub mask_builder: MaskBuilder,
    pub mask_cases: usize,
    pub two_pass_cases: usize,
    pub metric_cases: usize,
    pub grad_eps: f64,
    pub grad_tolerance: f64,
    /// Denominator floor for relative gradient errors.
    pub grad_floor: f64,
    pub two_pass_tolerance: f64,
    pub metric_tolerance: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            mask_builder: build_session_mask,
            mask_cases: 100,
            two_pass_cases: 100,
            metric_cases: 20,
            grad_eps: 1e-5,
            grad_tolerance: 1e-4,
            grad_floor: 1e-6,
            two_pass_tolerance: 1e-5,
            metric_tolerance: 1e-9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl SuiteReport {
    fn new(name: &'static str, cases: usize, max_error: f64, tolerance: f64, detail: String) -> Self {
        Self {
            name,
            passed: max_error.is_finite() && max_error <= tolerance,
            cases,
            max_error,
            tolerance,
            detail,
        }
    }

    fn failed(name: &'static str, detail: String) -> Self {
        Self {
            name,
            passed: false,
            cases: 0,
            max_error: f64::INFINITY,
            tolerance: 0.0,
            detail,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyReport {
    pub suites: Vec<SuiteReport>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<12} {:>6} {:>7} {:>12} {:>10}  detail\n",
            "suite", "result", "cases", "max_error", "tolerance"
        );
        for s in &self.suites {
            let _ = writeln!(
                out,
                "{:<12} {:>6} {:>7} {:>12.3e} {:>10.0e}  {}",
                s.name,
                if s.passed { "PASS" } else { "FAIL" },
                s.cases,
                s.max_error,
                s.tolerance,
                s.detail
            );
        }
        out
    }
}

pub fn run_all(opts: &VerifyOptions) -> VerifyReport {
    VerifyReport {
        suites: vec![
            gradient_suite(opts),
            mask_suite(opts),
            two_pass_suite(opts),
            metric_suite(opts),
        ],
    }
}

/// Two-layer model with perturbed weights so every path carries gradient.
pub fn toy_weights(vocab_size: usize, t_special: usize, seed: u64) -> ModelWeights {
    let cfg = ModelConfig {
        vocab_size,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 64,
        t_special,
        dropout: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = ModelWeights::init(cfg, &mut rng).expect("valid toy config");
    for p in w.params.iter_mut() {
        for v in p.data_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
    w
}

fn toy_batch(template: &TemplateConfig) -> (Vocabulary, PreparedBatch) {
    let words = "alpha beta gamma delta red green blue what about its color size tell me";
    let vocab = Vocabulary::build([words], 1000);
    let sample = |id: usize, turns: &[&str], pos: &str, neg: &str| TrainingSample {
        session: Session {
            conversation_id: format!("s{id}"),
            turns: turns
                .iter()
                .enumerate()
                .map(|(i, t)| if i % 2 == 0 { Turn::user(*t) } else { Turn::assistant(*t) })
                .collect(),
        },
        positive: Passage::new(format!("p{id}"), pos),
        hard_negatives: vec![Passage::new(format!("n{id}"), neg)],
    };
    let samples = [
        sample(0, &["tell me about alpha", "alpha is red", "what about its size"], "alpha size big", "beta size small"),
        sample(1, &["tell me about gamma", "gamma is blue", "what about its color"], "gamma color blue", "delta color green"),
        sample(2, &["what about delta color"], "delta color green", "alpha color red"),
    ];
    let prepared = samples
        .iter()
        .map(|s| PreparedSample::new(s, &vocab, template, true).expect("toy sample"))
        .collect();
    (vocab, PreparedBatch::new(prepared, true).expect("toy batch"))
}

fn batch_loss(weights: &ModelWeights, batch: &PreparedBatch, obj: &ObjectiveConfig) -> f64 {
    let mut g = Graph::new();
    let params = bind_params(&mut g, weights, false);
    let loss = micro_batch_loss(&mut g, &params, &weights.config, batch, obj, None).expect("toy loss");
    g.value(loss.total).item()
}

/// Reverse-mode gradients of the combined contrastive plus session-masked
/// loss against central finite differences, for every parameter element.
pub fn gradient_suite(opts: &VerifyOptions) -> SuiteReport {
    let name = "gradient";
    let template = TemplateConfig {
        t_special: 2,
        max_seq_len: 64,
    };
    let (vocab, batch) = toy_batch(&template);
    let weights = toy_weights(vocab.size(), template.t_special, opts.seed);
    let obj = ObjectiveConfig::csit();

    let mut g = Graph::new();
    let params = bind_params(&mut g, &weights, true);
    let analytic: Result<Vec<Vec<f64>>, String> = (|| {
        let loss = micro_batch_loss(&mut g, &params, &weights.config, &batch, &obj, None)
            .map_err(|e| e.to_string())?;
        g.backward(loss.total).map_err(|e| e.to_string())?;
        Ok(params
            .iter()
            .iter()
            .map(|v| g.grad(**v).map_or_else(|| vec![0.0; g.value(**v).numel()], <[f64]>::to_vec))
            .collect())
    })();
    let analytic = match analytic {
        Ok(a) => a,
        Err(e) => return SuiteReport::failed(name, e),
    };

    let names = weights.params.names();
    let mut probe = weights.clone();
    let mut worst = (0.0f64, String::new());
    let mut cases = 0;
    for (p, grad) in analytic.iter().enumerate() {
        let original = weights.params.iter()[p].clone();
        let numeric = finite_difference_gradient(
            |x| {
                *probe.params.iter_mut()[p] = x.clone();
                batch_loss(&probe, &batch, &obj)
            },
            &original,
            opts.grad_eps,
        );
        *probe.params.iter_mut()[p] = original;
        for (i, (a, n)) in grad.iter().zip(&numeric).enumerate() {
            cases += 1;
            let err = relative_error(*a, *n, opts.grad_floor);
            if !(err <= worst.0) {
                worst = (err, format!("worst at {}[{i}]", names[p]));
            }
        }
    }
    SuiteReport::new(name, cases, worst.0, opts.grad_tolerance, worst.1)
}

fn random_sequence(rng: &mut ChaCha8Rng, max_n: usize, max_m: usize, words: u32) -> PackedSequence {
    let t = rng.gen_range(1..=3);
    let n = rng.gen_range(0..=max_n);
    let m = rng.gen_range(1..=max_m);
    let body: Vec<u32> = (0..n).map(|_| FIRST_WORD_ID + rng.gen_range(0..words)).collect();
    let resp: Vec<u32> = (0..m).map(|_| FIRST_WORD_ID + rng.gen_range(0..words)).collect();
    PackedSequence::from_parts(&body, &resp, t)
}

/// Post-softmax attention mass that response rows place on session columns,
/// for masks produced by the configured builder. Must be exactly zero.
pub fn mask_suite(opts: &VerifyOptions) -> SuiteReport {
    let name = "mask";
    let words = 30;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6d61_736b);
    let mut worst = 0.0f64;
    for case in 0..opts.mask_cases {
        let seq = random_sequence(&mut rng, 16, 16, words);
        let w = toy_weights(FIRST_WORD_ID as usize + words as usize, seq.t_special(), case as u64);
        let mask = (opts.mask_builder)(&seq);
        let out = match forward(seq.token_ids(), &mask, &w) {
            Ok(o) => o,
            Err(e) => return SuiteReport::failed(name, format!("case {case}: {e}")),
        };
        let l = seq.len();
        for layer in &out.attention {
            for head in layer {
                for i in seq.response_region() {
                    for j in 0..seq.n_session() {
                        worst = worst.max(head.data()[i * l + j].abs());
                    }
                }
            }
        }
    }
    SuiteReport::new(
        name,
        opts.mask_cases,
        worst,
        0.0,
        "max attention from response rows to session tokens".into(),
    )
}

/// Mean response NLL from one forward pass under the configured mask.
fn builder_lm_loss(seq: &PackedSequence, w: &ModelWeights, builder: MaskBuilder) -> Result<f64, String> {
    let out = forward(seq.token_ids(), &builder(seq), w).map_err(|e| e.to_string())?;
    let v = w.config.vocab_size;
    let first = seq.session_special_range().end - 1;
    let logits = out.logits.data();
    let mut total = 0.0;
    for (i, &target) in seq.response_tokens().iter().enumerate() {
        let row = &logits[(first + i) * v..(first + i + 1) * v];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += lse - row[target as usize];
    }
    Ok(total / seq.n_response() as f64)
}

/// Single-pass masked LM loss against the two-pass reference that encodes
/// the session first and then the response with cached special states.
pub fn two_pass_suite(opts: &VerifyOptions) -> SuiteReport {
    let name = "two_pass";
    let words = 30;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x7477_6f70);
    let mut worst = 0.0f64;
    for case in 0..opts.two_pass_cases {
        let seq = random_sequence(&mut rng, 16, 16, words);
        let w = toy_weights(FIRST_WORD_ID as usize + words as usize, seq.t_special(), 1000 + case as u64);
        let reference = match two_pass_lm_loss_oracle(&seq, &w) {
            Ok(x) => x,
            Err(e) => return SuiteReport::failed(name, format!("case {case}: {e}")),
        };
        let single = session_masked_lm_loss(&seq, &w, LmMask::Session).map_err(|e| e.to_string());
        let built = builder_lm_loss(&seq, &w, opts.mask_builder);
        match (single, built) {
            (Ok(a), Ok(b)) => worst = worst.max((a - reference).abs()).max((b - reference).abs()),
            (Err(e), _) | (_, Err(e)) => return SuiteReport::failed(name, format!("case {case}: {e}")),
        }
    }
    SuiteReport::new(
        name,
        opts.two_pass_cases,
        worst,
        opts.two_pass_tolerance,
        "max |single pass - two pass| mean NLL".into(),
    )
}

fn brute_dcg(grades: &[u32]) -> f64 {
    grades
        .iter()
        .enumerate()
        .map(|(i, &g)| (2f64.powi(g as i32) - 1.0) / (i as f64 + 2.0).log2())
        .sum()
}

/// Best DCG@k over every ordering of the judged pids.
fn brute_ideal_dcg(mut grades: Vec<u32>, k: usize) -> f64 {
    fn permute(items: &mut Vec<u32>, start: usize, k: usize, best: &mut f64) {
        if start == items.len() {
            *best = best.max(brute_dcg(&items[..k.min(items.len())]));
            return;
        }
        for i in start..items.len() {
            items.swap(start, i);
            permute(items, start + 1, k, best);
            items.swap(start, i);
        }
    }
    let mut best = 0.0;
    permute(&mut grades, 0, k, &mut best);
    best
}

/// Production NDCG, recall and MRR against brute-force references on random
/// rankings, plus the hand-computed graded example.
pub fn metric_suite(opts: &VerifyOptions) -> SuiteReport {
    let name = "metrics";
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6d65_7472);
    let mut worst = 0.0f64;

    let worked: BTreeMap<String, u32> = [("a", 1), ("c", 2)].map(|(p, g)| (p.to_string(), g)).into();
    let expected = 2.5 / (3.0 + 1.0 / 3f64.log2());
    worst = worst.max((ndcg_at_k(&["a", "b", "c"], &worked, 3) - expected).abs());

    for _ in 0..opts.metric_cases {
        let pool: Vec<String> = (0..12).map(|i| format!("d{i}")).collect();
        let mut judged = BTreeMap::new();
        for p in &pool {
            if rng.gen_bool(0.4) {
                judged.insert(p.clone(), rng.gen_range(0..4u32));
            }
        }
        if !judged.values().any(|&g| g > 0) {
            judged.insert(pool[0].clone(), 1);
        }
        let mut ranking: Vec<&str> = pool.iter().map(String::as_str).collect();
        for i in (1..ranking.len()).rev() {
            ranking.swap(i, rng.gen_range(0..=i));
        }
        ranking.truncate(rng.gen_range(1..=12));
        for k in [1, 3, 5, 10] {
            let grade = |p: &str| judged.get(p).copied().unwrap_or(0);
            let top: Vec<u32> = ranking.iter().take(k).map(|p| grade(p)).collect();
            let positives: Vec<u32> = judged.values().copied().filter(|&g| g > 0).collect();
            let ndcg = brute_dcg(&top) / brute_ideal_dcg(positives.clone(), k);
            let recall = top.iter().filter(|&&g| g >= 1).count() as f64 / positives.len() as f64;
            let mrr = top.iter().position(|&g| g >= 1).map_or(0.0, |r| 1.0 / (r as f64 + 1.0));
            worst = worst
                .max((ndcg_at_k(&ranking, &judged, k) - ndcg).abs())
                .max((recall_at_k(&ranking, &judged, k) - recall).abs())
                .max((mrr_at_k(&ranking, &judged, k) - mrr).abs());
        }
    }
    SuiteReport::new(
        name,
        opts.metric_cases + 1,
        worst,
        opts.metric_tolerance,
        "max |production - brute force| over ndcg, recall, mrr".into(),
    )
}
