//! The optimization loop: micro-batch gradients averaged per step, Adam
//! updates, and a `(step, L_C, L_S, L)` loss trace.

use std::fmt::Write as _;

use rand_chacha::ChaCha8Rng;

use super::{sub_rng, BatchSchedule, TrainConfig, TrainError};
use crate::model::{bind_params, ModelConfig, ModelWeights};
use crate::numeric::{AdamConfig, AdamState, Graph};
use crate::objectives::{micro_batch_loss, ObjectiveConfig, PreparedBatch, PreparedSample};
use crate::text::{TemplateConfig, TextError, TrainingSample, Vocabulary};

const INIT_DOMAIN: u64 = 0x494e_4954;
const DROPOUT_DOMAIN: u64 = 0x4452_4f50;

/// Model weights, optimizer moments and the number of completed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub weights: ModelWeights,
    pub adam: AdamState,
    pub step: usize,
}

impl TrainState {
    /// Fresh weights drawn from `seed`.
    pub fn init(model: ModelConfig, seed: u64) -> Result<Self, TrainError> {
        let weights = ModelWeights::init(model, &mut sub_rng(seed, INIT_DOMAIN, 0))?;
        Ok(Self::from_weights(weights))
    }

    pub fn from_weights(weights: ModelWeights) -> Self {
        let adam = AdamState::new(weights.params.iter());
        Self {
            weights,
            adam,
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    /// 1-based optimizer step.
    pub step: usize,
    pub l_c: f64,
    /// Zero when the LM term is disabled.
    pub l_s: f64,
    pub l: f64,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("step,L_C,L_S,L\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.step, r.l_c, r.l_s, r.l).expect("string write");
    }
    out
}

/// Renders samples to token ids, skipping those that cannot be packed.
/// Returns the kept samples and the ids of the rejected ones.
pub fn prepare_samples(
    samples: &[TrainingSample],
    vocab: &Vocabulary,
    template: &TemplateConfig,
    with_lm: bool,
) -> Result<(Vec<PreparedSample>, Vec<String>), TrainError> {
    let mut kept = Vec::with_capacity(samples.len());
    let mut rejected = Vec::new();
    for s in samples {
        match PreparedSample::new(s, vocab, template, with_lm) {
            Ok(p) => kept.push(p),
            Err(TextError::SampleRejected(why)) => {
                log::warn!("skipping {}: {why}", s.session.conversation_id);
                rejected.push(s.session.conversation_id.clone());
            }
            Err(e) => return Err(e.into()),
        }
    }
    if kept.is_empty() {
        return Err(TrainError::Config("no usable training samples".into()));
    }
    Ok((kept, rejected))
}

/// Loss values and parameter gradients averaged over micro-batches.
#[derive(Clone, Debug)]
pub struct StepGradients {
    pub grads: Vec<Vec<f64>>,
    pub l_c: f64,
    pub l_s: f64,
    pub l: f64,
}

/// Runs forward and backward over each micro-batch and averages the
/// per-micro-batch gradients with equal weight.
pub fn accumulate_gradients(
    weights: &ModelWeights,
    micro_batches: &[PreparedBatch],
    obj: &ObjectiveConfig,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
    step: usize,
) -> Result<StepGradients, TrainError> {
    let n_params = weights.params.len();
    let mut grads: Vec<Vec<f64>> = weights.params.iter().iter().map(|t| vec![0.0; t.numel()]).collect();
    let (mut l_c, mut l_s, mut l) = (0.0, 0.0, 0.0);
    let scale = 1.0 / micro_batches.len() as f64;
    for mb in micro_batches {
        let mut g = Graph::new();
        let params = bind_params(&mut g, weights, true);
        let rng = dropout_rng.as_deref_mut().map(|r| r as &mut dyn rand::RngCore);
        let loss = micro_batch_loss(&mut g, &params, &weights.config, mb, obj, rng)?;
        let total = g.value(loss.total).item();
        if !total.is_finite() {
            return Err(non_finite(&g, &loss, mb, step));
        }
        g.backward(loss.total)?;
        for (acc, var) in grads.iter_mut().zip(params.iter()) {
            if let Some(gr) = g.grad(*var) {
                for (a, b) in acc.iter_mut().zip(gr) {
                    *a += scale * b;
                }
            }
        }
        l_c += scale * g.value(loss.contrastive).item();
        l_s += scale * loss.lm.map_or(0.0, |v| g.value(v).item());
        l += scale * total;
    }
    debug_assert_eq!(grads.len(), n_params);
    Ok(StepGradients { grads, l_c, l_s, l })
}

fn non_finite(
    g: &Graph,
    loss: &crate::objectives::BatchLoss,
    mb: &PreparedBatch,
    step: usize,
) -> TrainError {
    let bad = |terms: &[crate::numeric::Var]| {
        terms
            .iter()
            .position(|&v| !g.value(v).item().is_finite())
    };
    let (sample, component) = match (bad(&loss.contrastive_terms), bad(&loss.lm_terms)) {
        (Some(i), _) => (mb.samples()[i].id.clone(), "L_C"),
        (None, Some(i)) => (mb.samples()[i].id.clone(), "L_S"),
        (None, None) => (
            mb.samples().iter().map(|s| s.id.as_str()).collect::<Vec<_>>().join(","),
            "L",
        ),
    };
    TrainError::NonFinite {
        step: step + 1,
        sample,
        component,
    }
}

/// Splits batch `indices` into micro-batches.
pub fn micro_batches(
    data: &[PreparedSample],
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<PreparedBatch>, TrainError> {
    indices
        .chunks(cfg.micro_batch_len(indices.len()))
        .map(|chunk| {
            let samples = chunk.iter().map(|&i| data[i].clone()).collect();
            PreparedBatch::new(samples, cfg.in_batch_negatives).map_err(TrainError::from)
        })
        .collect()
}

/// Advances `state` until `state.step == until`, calling `on_step` after
/// every update. Deterministic in `(data, cfg, state)`, so stopping and
/// resuming from a saved state reproduces an uninterrupted run.
pub fn train_steps(
    state: &mut TrainState,
    data: &[PreparedSample],
    cfg: &TrainConfig,
    until: usize,
    mut on_step: impl FnMut(&TrainState, &TraceRow) -> Result<(), TrainError>,
) -> Result<Vec<TraceRow>, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::Config("no training samples".into()));
    }
    let obj = cfg.objective();
    let adam = AdamConfig {
        lr: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let schedule = BatchSchedule::new(data.len(), cfg.batch_size, cfg.seed);
    let use_dropout = state.weights.config.dropout > 0.0;
    let mut trace = Vec::new();
    while state.step < until {
        let indices = schedule.batch(state.step);
        let mbs = micro_batches(data, &indices, cfg)?;
        let mut rng = use_dropout.then(|| sub_rng(cfg.seed, DROPOUT_DOMAIN, state.step as u64));
        let sg = accumulate_gradients(&state.weights, &mbs, &obj, rng.as_mut(), state.step)?;
        let mut params = state.weights.params.iter_mut();
        state.adam.step(&mut params, &sg.grads, &adam)?;
        state.step += 1;
        let row = TraceRow {
            step: state.step,
            l_c: sg.l_c,
            l_s: sg.l_s,
            l: sg.l,
        };
        log::debug!("step {} L_C={:.5} L_S={:.5} L={:.5}", row.step, row.l_c, row.l_s, row.l);
        on_step(state, &row)?;
        trace.push(row);
    }
    Ok(trace)
}

/// Trains fresh weights for `cfg.steps` steps.
pub fn train(
    data: &[PreparedSample],
    model: ModelConfig,
    cfg: &TrainConfig,
) -> Result<(TrainState, Vec<TraceRow>), TrainError> {
    let mut state = TrainState::init(cfg.model_config(model), cfg.seed)?;
    let trace = train_steps(&mut state, data, cfg, cfg.steps, |_, _| Ok(()))?;
    Ok((state, trace))
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::build_vocabulary;
    use crate::synthetic::{generate, SyntheticConfig};
    use crate::trainer::{decode_checkpoint, encode_checkpoint, Checkpoint};

    fn tiny() -> (Vec<TrainingSample>, Vocabulary, ModelConfig) {
        let task = generate(&SyntheticConfig {
            n_entities: 6,
            n_attributes: 4,
            n_conversations: 4,
            n_heldout: 1,
            turns_per_conversation: 2,
            n_adhoc: 6,
            n_hard_negatives: 2,
            n_value_words: 5,
            seed: 3,
        })
        .unwrap();
        let vocab = build_vocabulary(&task.train, &task.corpus, 1000);
        let model = ModelConfig {
            vocab_size: vocab.size(),
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 64,
            t_special: 2,
            dropout: 0.0,
        };
        (task.train, vocab, model)
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            steps: 4,
            batch_size: 4,
            grad_accum_steps: 2,
            n_hard_negatives: 2,
            learning_rate: 1e-2,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    fn prepared(cfg: &TrainConfig) -> (Vec<PreparedSample>, ModelConfig) {
        let (train, vocab, model) = tiny();
        let model = cfg.model_config(model);
        let (data, _) = prepare_samples(&train, &vocab, &model.template(), cfg.objective().lm_enabled()).unwrap();
        (data, model)
    }

    #[test]
    fn trace_bookkeeping_identity() {
        let mut c = cfg();
        c.alpha = 0.7;
        let (data, model) = prepared(&c);
        let (_, trace) = train(&data, model, &c).unwrap();
        assert_eq!(trace.len(), 4);
        for r in &trace {
            assert!((r.l - (r.l_c + c.alpha * r.l_s)).abs() < 1e-12);
            assert!(r.l_s > 0.0);
        }
        assert!(trace_csv(&trace).starts_with("step,L_C,L_S,L\n1,"));
    }

    #[test]
    fn zero_alpha_equals_contrastive_only() {
        let mut a = cfg();
        a.alpha = 0.0;
        let mut b = cfg();
        b.ablation.no_sit = true;
        let (da, model) = prepared(&a);
        let (db, _) = prepared(&b);
        let (sa, ta) = train(&da, model, &a).unwrap();
        let (sb, tb) = train(&db, model, &b).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(sa.weights, sb.weights);
        assert!(ta.iter().all(|r| r.l_s == 0.0 && r.l == r.l_c));
    }

    #[test]
    fn same_seed_same_weights() {
        let c = cfg();
        let (data, model) = prepared(&c);
        let (s1, t1) = train(&data, model, &c).unwrap();
        let (s2, t2) = train(&data, model, &c).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(t1, t2);
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let mut c = cfg();
        c.steps = 6;
        let (data, model) = prepared(&c);
        let (full_state, full_trace) = train(&data, model, &c).unwrap();

        let mut state = TrainState::init(c.model_config(model), c.seed).unwrap();
        let mut trace = train_steps(&mut state, &data, &c, 3, |_, _| Ok(())).unwrap();
        let (_, vocab, _) = tiny();
        let bytes = encode_checkpoint(&Checkpoint {
            state,
            train_config: c.clone(),
            vocab,
        });
        let mut resumed = decode_checkpoint(&bytes).unwrap().state;
        assert_eq!(resumed.step, 3);
        trace.extend(train_steps(&mut resumed, &data, &c, 6, |_, _| Ok(())).unwrap());
        assert_eq!(trace, full_trace);
        assert_eq!(resumed, full_state);
    }

    #[test]
    fn accumulation_matches_concatenated_batch_without_in_batch_negatives() {
        let mut c = cfg();
        c.in_batch_negatives = false;
        let (data, model) = prepared(&c);
        let weights = TrainState::init(model, 1).unwrap().weights;
        let idx = [0, 1, 2, 3];
        let obj = c.objective();
        let whole = PreparedBatch::new(idx.iter().map(|&i| data[i].clone()).collect(), false).unwrap();
        let one = accumulate_gradients(&weights, &[whole], &obj, None, 0).unwrap();
        let split = micro_batches(&data, &idx, &c).unwrap();
        assert_eq!(split.len(), 2);
        let two = accumulate_gradients(&weights, &split, &obj, None, 0).unwrap();
        assert!((one.l - two.l).abs() < 1e-12);
        assert!((one.l_s - two.l_s).abs() < 1e-12);
        for (a, b) in one.grads.iter().zip(&two.grads) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn non_finite_loss_names_the_sample() {
        let mut c = cfg();
        c.ablation.no_sit = true;
        let (mut data, model) = prepared(&c);
        let mut state = TrainState::init(model, c.seed).unwrap();
        // Route one sample of the first batch through a poisoned, otherwise
        // unused embedding row.
        let first = BatchSchedule::new(data.len(), c.batch_size, c.seed).batch(0)[1];
        data[first].session_tokens[0] = crate::text::PAD;
        let target = data[first].clone();
        let d = model.d_model;
        state.weights.params.token_embedding.data_mut()[crate::text::PAD as usize * d] = f64::NAN;
        match train_steps(&mut state, &data, &c, 1, |_, _| Ok(())) {
            Err(TrainError::NonFinite { step, sample, .. }) => {
                assert_eq!(step, 1);
                assert_eq!(sample, target.id);
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }
}
