//! Session-masked language modeling over a packed `[session, specials,
//! response, specials]` sequence.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::ObjectiveError;
use crate::model::{
    bind_params, build_causal_mask, build_session_mask, encode, lm_logits, ModelConfig,
    ModelParams, ModelWeights,
};
use crate::numeric::{Graph, Var};
use crate::text::PackedSequence;

/// Attention pattern used for the LM term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LmMask {
    /// Response rows see only the session special tokens and earlier
    /// response positions.
    #[default]
    Session,
    /// Plain causal attention over the whole packed sequence.
    Causal,
}

/// Graph handles from one packed forward.
#[derive(Debug)]
pub struct SessionLmOutput {
    /// Mean negative log-likelihood of the response tokens.
    pub loss: Var,
    /// Unit-norm `1×d` embedding read at the last session special token.
    /// Under both masks the session prefix is causal, so this equals the
    /// embedding of the session formatted on its own.
    pub session_embedding: Var,
}

/// Builds the LM loss for `seq`. Row `N+t−1+i` predicts response token `i`.
pub fn session_lm_graph(
    g: &mut Graph,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
    seq: &PackedSequence,
    mask_kind: LmMask,
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<SessionLmOutput, ObjectiveError> {
    let m = seq.n_response();
    if m == 0 {
        return Err(ObjectiveError::Contract("empty response".into()));
    }
    if seq.t_special() != cfg.t_special {
        return Err(ObjectiveError::Contract(format!(
            "sequence packed with t={} for a model with t={}",
            seq.t_special(),
            cfg.t_special
        )));
    }
    let mask = match mask_kind {
        LmMask::Session => build_session_mask(seq),
        LmMask::Causal => build_causal_mask(seq.len()),
    };
    let enc = encode(g, params, cfg, seq.token_ids(), &mask, dropout_rng)?;
    let last_special = seq.session_special_range().end - 1;
    let rows: Vec<usize> = (last_special..last_special + m).collect();
    let targets: Vec<usize> = seq.response_tokens().iter().map(|&t| t as usize).collect();
    let logits = lm_logits(g, params, enc.hidden, &rows)?;
    let loss = g.cross_entropy(logits, &targets)?;
    let anchor = g.select_rows(enc.hidden, &[last_special])?;
    let session_embedding = g.l2_normalize_rows(anchor)?;
    Ok(SessionLmOutput {
        loss,
        session_embedding,
    })
}

/// Value of the session-masked LM loss for one packed sequence.
pub fn session_masked_lm_loss(
    seq: &PackedSequence,
    weights: &ModelWeights,
    mask_kind: LmMask,
) -> Result<f64, ObjectiveError> {
    let mut g = Graph::new();
    let params = bind_params(&mut g, weights, false);
    let out = session_lm_graph(&mut g, &params, &weights.config, seq, mask_kind, None)?;
    Ok(g.value(out.loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::embed_text;
    use crate::numeric::Tensor;
    use crate::text::FIRST_WORD_ID;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 64,
            t_special: 2,
            dropout: 0.0,
        }
    }

    fn words(n: usize, base: u32) -> Vec<u32> {
        (0..n as u32).map(|i| FIRST_WORD_ID + (base + i) % 30).collect()
    }

    #[test]
    fn zero_head_gives_log_vocab() {
        let mut w = ModelWeights::init(cfg(64), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        w.params.output_proj = Tensor::zeros(&[16, 64]);
        let seq = PackedSequence::from_parts(&words(5, 0), &words(4, 11), 2);
        for kind in [LmMask::Session, LmMask::Causal] {
            let l = session_masked_lm_loss(&seq, &w, kind).unwrap();
            assert!((l - 64f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn anchor_embedding_matches_standalone_session() {
        let w = ModelWeights::init(cfg(64), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let seq = PackedSequence::from_parts(&words(6, 2), &words(3, 9), 2);
        let standalone = embed_text(&seq.session_prefix(), &w).unwrap();
        for kind in [LmMask::Session, LmMask::Causal] {
            let mut g = Graph::new();
            let p = bind_params(&mut g, &w, false);
            let out = session_lm_graph(&mut g, &p, &w.config, &seq, kind, None).unwrap();
            let e = g.value(out.session_embedding).data();
            for (a, b) in e.iter().zip(&standalone) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_response_rejected() {
        let w = ModelWeights::init(cfg(64), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let seq = PackedSequence::from_parts(&words(3, 0), &[], 2);
        assert!(matches!(
            session_masked_lm_loss(&seq, &w, LmMask::Session),
            Err(ObjectiveError::Contract(_))
        ));
    }
}
