//! Per-micro-batch objective: shared passage encodings, in-batch negative
//! pools, and the combined loss.

use std::collections::HashMap;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{
    combined_loss, contrastive_loss, session_lm_graph, ContrastiveConfig, LmMask, LossWeights,
    ObjectiveError,
};
use crate::model::{embed_in_graph, ModelConfig, ModelParams};
use crate::numeric::{Graph, Var};
use crate::text::{
    format_passage, format_session, pack_training_sequence, PackedSequence, TemplateConfig,
    TextError, TrainingSample, Vocabulary,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub contrastive: ContrastiveConfig,
    pub weights: LossWeights,
    pub lm_mask: LmMask,
    /// When false the LM term is skipped entirely, as it is when α is 0.
    pub session_lm: bool,
}

impl ObjectiveConfig {
    pub fn csit() -> Self {
        Self {
            session_lm: true,
            ..Self::default()
        }
    }

    pub fn lm_enabled(&self) -> bool {
        self.session_lm && self.weights.alpha > 0.0
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        self.contrastive.validate()?;
        self.weights.validate()
    }
}

/// A training sample rendered to token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    /// Conversation id, used in diagnostics.
    pub id: String,
    pub session_tokens: Vec<u32>,
    /// Present when the sample takes part in the LM term.
    pub packed: Option<PackedSequence>,
    pub positive: (String, Vec<u32>),
    pub hard_negatives: Vec<(String, Vec<u32>)>,
}

impl PreparedSample {
    pub fn new(
        sample: &TrainingSample,
        vocab: &Vocabulary,
        template: &TemplateConfig,
        with_lm: bool,
    ) -> Result<Self, TextError> {
        sample.validate()?;
        let passage = |p: &crate::text::Passage| -> Result<(String, Vec<u32>), TextError> {
            Ok((p.pid.clone(), format_passage(&p.text, vocab, template)?))
        };
        let packed = if with_lm {
            let seq = pack_training_sequence(sample, vocab, template)?;
            if seq.n_response() == 0 {
                return Err(TextError::SampleRejected(format!(
                    "positive {} has no tokens to model",
                    sample.positive.pid
                )));
            }
            Some(seq)
        } else {
            None
        };
        Ok(Self {
            id: sample.session.conversation_id.clone(),
            session_tokens: format_session(&sample.session, vocab, template)?,
            packed,
            positive: passage(&sample.positive)?,
            hard_negatives: sample
                .hard_negatives
                .iter()
                .map(passage)
                .collect::<Result<_, _>>()?,
        })
    }
}

/// Samples of one micro-batch with deduplicated passages. Each sample's
/// negative pool holds its hard negatives and, optionally, the other
/// samples' positives; its own positive pid never appears in the pool.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    samples: Vec<PreparedSample>,
    passages: Vec<Vec<u32>>,
    pids: Vec<String>,
    positive: Vec<usize>,
    pools: Vec<Vec<usize>>,
}

impl PreparedBatch {
    pub fn new(samples: Vec<PreparedSample>, in_batch_negatives: bool) -> Result<Self, ObjectiveError> {
        if samples.is_empty() {
            return Err(ObjectiveError::Contract("empty batch".into()));
        }
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut passages = Vec::new();
        let mut pids = Vec::new();
        let mut intern = |pid: &str, tokens: &[u32]| -> usize {
            *index.entry(pid.to_string()).or_insert_with(|| {
                passages.push(tokens.to_vec());
                pids.push(pid.to_string());
                passages.len() - 1
            })
        };
        let positive: Vec<usize> = samples
            .iter()
            .map(|s| intern(&s.positive.0, &s.positive.1))
            .collect();
        let mut pools = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let mut pool: Vec<usize> = Vec::new();
            let mut push = |id: usize| {
                if id != positive[i] && !pool.contains(&id) {
                    pool.push(id);
                }
            };
            for (pid, tokens) in &s.hard_negatives {
                push(intern(pid, tokens));
            }
            if in_batch_negatives {
                for &p in &positive {
                    push(p);
                }
            }
            if pool.is_empty() {
                return Err(ObjectiveError::Contract(format!(
                    "sample {i} (positive {}) has no negatives",
                    s.positive.0
                )));
            }
            pools.push(pool);
        }
        Ok(Self {
            samples,
            passages,
            pids,
            positive,
            pools,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[PreparedSample] {
        &self.samples
    }

    /// Negative pool of sample `i` as pids.
    pub fn negative_pids(&self, i: usize) -> Vec<&str> {
        self.pools[i].iter().map(|&p| self.pids[p].as_str()).collect()
    }
}

#[derive(Debug)]
pub struct BatchLoss {
    pub total: Var,
    pub contrastive: Var,
    /// Absent when the LM term is disabled.
    pub lm: Option<Var>,
    /// Per-sample contrastive terms, in batch order.
    pub contrastive_terms: Vec<Var>,
    /// Per-sample LM terms, empty when the LM term is disabled.
    pub lm_terms: Vec<Var>,
}

fn reborrow<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

/// Mean contrastive loss plus α times the mean per-sample LM loss.
pub fn micro_batch_loss(
    g: &mut Graph,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
    batch: &PreparedBatch,
    obj: &ObjectiveConfig,
    mut dropout_rng: Option<&mut dyn RngCore>,
) -> Result<BatchLoss, ObjectiveError> {
    let use_lm = obj.lm_enabled();
    let mut session = Vec::with_capacity(batch.len());
    let mut lm_terms = Vec::new();
    for s in &batch.samples {
        match (&s.packed, use_lm) {
            (Some(seq), true) => {
                let out = session_lm_graph(g, params, cfg, seq, obj.lm_mask, reborrow(&mut dropout_rng))?;
                session.push(out.session_embedding);
                lm_terms.push(out.loss);
            }
            (None, true) => {
                return Err(ObjectiveError::Contract(
                    "sample prepared without a packed sequence".into(),
                ))
            }
            _ => session.push(embed_in_graph(
                g,
                params,
                cfg,
                &s.session_tokens,
                reborrow(&mut dropout_rng),
            )?),
        }
    }
    let mut passages = Vec::with_capacity(batch.passages.len());
    for p in &batch.passages {
        passages.push(embed_in_graph(g, params, cfg, p, reborrow(&mut dropout_rng))?);
    }
    let mut contrastive_terms = Vec::with_capacity(batch.len());
    for (i, &e_x) in session.iter().enumerate() {
        let negs: Vec<Var> = batch.pools[i].iter().map(|&p| passages[p]).collect();
        contrastive_terms.push(contrastive_loss(
            g,
            e_x,
            passages[batch.positive[i]],
            &negs,
            obj.contrastive.temperature,
        )?);
    }
    let contrastive = g.mean_scalars(&contrastive_terms)?;
    if !use_lm {
        return Ok(BatchLoss {
            total: contrastive,
            contrastive,
            lm: None,
            contrastive_terms,
            lm_terms,
        });
    }
    let lm = g.mean_scalars(&lm_terms)?;
    let total = combined_loss(g, contrastive, lm, obj.weights)?;
    Ok(BatchLoss {
        total,
        contrastive,
        lm: Some(lm),
        contrastive_terms,
        lm_terms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{bind_params, ModelWeights};
    use crate::text::{Passage, Session};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocabulary {
        Vocabulary::build(["alpha beta gamma delta tea price history of rome cost"], 50)
    }

    fn template() -> TemplateConfig {
        TemplateConfig {
            t_special: 2,
            max_seq_len: 64,
        }
    }

    fn sample(id: &str, pos: &str, negs: &[&str]) -> TrainingSample {
        TrainingSample {
            session: Session::single(id, format!("price of {id}")),
            positive: Passage::new(pos, format!("{pos} tea cost")),
            hard_negatives: negs
                .iter()
                .map(|n| Passage::new(*n, format!("history of {n}")))
                .collect(),
        }
    }

    fn prepared(s: &TrainingSample, lm: bool) -> PreparedSample {
        PreparedSample::new(s, &vocab(), &template(), lm).unwrap()
    }

    #[test]
    fn pools_exclude_own_positive_and_deduplicate() {
        let batch = PreparedBatch::new(
            vec![
                prepared(&sample("a", "p1", &["n1", "p2"]), false),
                prepared(&sample("b", "p2", &["n1"]), false),
                prepared(&sample("c", "p1", &["n2"]), false),
            ],
            true,
        )
        .unwrap();
        assert_eq!(batch.negative_pids(0), vec!["n1", "p2"]);
        assert_eq!(batch.negative_pids(1), vec!["n1", "p1"]);
        assert_eq!(batch.negative_pids(2), vec!["n2", "p2"]);
        assert_eq!(batch.passages.len(), 4);
    }

    #[test]
    fn no_negatives_is_an_error() {
        let r = PreparedBatch::new(vec![prepared(&sample("a", "p1", &[]), false)], true);
        assert!(matches!(r, Err(ObjectiveError::Contract(_))));
    }

    #[test]
    fn disabled_lm_leaves_only_contrastive() {
        let cfg = ModelConfig {
            vocab_size: 40,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 64,
            t_special: 2,
            dropout: 0.0,
        };
        let w = ModelWeights::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let samples = vec![
            prepared(&sample("a", "p1", &["n1"]), true),
            prepared(&sample("b", "p2", &[]), true),
        ];
        let batch = PreparedBatch::new(samples, true).unwrap();
        let value = |obj: ObjectiveConfig| {
            let mut g = Graph::new();
            let p = bind_params(&mut g, &w, false);
            let l = micro_batch_loss(&mut g, &p, &cfg, &batch, &obj, None).unwrap();
            (
                g.value(l.total).item(),
                g.value(l.contrastive).item(),
                l.lm.map(|v| g.value(v).item()),
            )
        };
        let mut obj = ObjectiveConfig::csit();
        let (total, lc, ls) = value(obj);
        let ls = ls.unwrap();
        assert!((total - (lc + ls)).abs() < 1e-12);
        obj.weights.alpha = 0.0;
        let (total0, lc0, ls0) = value(obj);
        assert_eq!(ls0, None);
        assert_eq!(total0, lc0);
        assert!((lc0 - lc).abs() < 1e-12);
        obj.weights.alpha = 0.5;
        let (total5, _, _) = value(obj);
        assert!((total5 - (lc + 0.5 * ls)).abs() < 1e-12);
    }
}
