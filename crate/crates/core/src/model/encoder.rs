//! Pre-norm decoder-style transformer evaluated on a [`Graph`].

use rand::{Rng, RngCore};

use super::{AttentionMask, ModelConfig, ModelError, ModelParams, ModelWeights};
use crate::numeric::{Graph, Tensor, Var};
use crate::text::{emb_id, PackedSequence};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Fixed sinusoidal position encodings for absolute positions
/// `offset..offset+len`.
pub fn sinusoidal_positions(offset: usize, len: usize, d_model: usize) -> Tensor {
    let mut data = vec![0.0; len * d_model];
    for p in 0..len {
        let pos = (offset + p) as f64;
        for i in 0..d_model / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[p * d_model + 2 * i] = (pos * freq).sin();
            data[p * d_model + 2 * i + 1] = (pos * freq).cos();
        }
        if d_model % 2 == 1 {
            let i = d_model / 2;
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[p * d_model + d_model - 1] = (pos * freq).sin();
        }
    }
    Tensor::new(vec![len, d_model], data).expect("positions")
}

/// Registers every weight tensor as a graph leaf.
pub fn bind_params(g: &mut Graph, weights: &ModelWeights, trainable: bool) -> ModelParams<Var> {
    weights.params.map(|t| g.leaf(t.clone(), trainable))
}

/// Graph handles produced by one encoder pass.
#[derive(Debug)]
pub struct Encoded {
    /// `L×d_model` final-layer-normed hidden states.
    pub hidden: Var,
    /// Post-softmax attention probabilities, indexed `[layer][head]`.
    pub attention: Vec<Vec<Var>>,
}

fn dropout(
    g: &mut Graph,
    x: Var,
    p: f64,
    rng: &mut Option<&mut dyn RngCore>,
) -> Result<Var, ModelError> {
    let Some(rng) = rng.as_deref_mut() else {
        return Ok(x);
    };
    if p == 0.0 {
        return Ok(x);
    }
    let shape = g.value(x).shape().to_vec();
    let keep = 1.0 / (1.0 - p);
    let data = (0..g.value(x).numel())
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    let m = g.constant(Tensor::new(shape, data)?);
    Ok(g.mul(x, m)?)
}

/// Runs the transformer over `token_ids` under `mask`. Dropout is applied
/// only when an RNG is supplied.
pub fn encode(
    g: &mut Graph,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
    token_ids: &[u32],
    mask: &AttentionMask,
    mut dropout_rng: Option<&mut dyn RngCore>,
) -> Result<Encoded, ModelError> {
    let len = token_ids.len();
    if len == 0 {
        return Err(ModelError::Contract("empty input".into()));
    }
    if len > cfg.max_seq_len {
        return Err(ModelError::Contract(format!(
            "input of {len} tokens exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    if mask.len() != len {
        return Err(ModelError::Contract(format!(
            "mask of size {} for {len} tokens",
            mask.len()
        )));
    }
    let ids: Vec<usize> = token_ids.iter().map(|&i| i as usize).collect();
    let tok = g.gather(params.token_embedding, &ids)?;
    let pos = g.constant(sinusoidal_positions(0, len, cfg.d_model));
    let mut x = g.add(tok, pos)?;
    let dh = cfg.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut attention = Vec::with_capacity(cfg.n_layers);
    for layer in &params.layers {
        let h = g.layer_norm(x, layer.ln1_gain, layer.ln1_bias, LAYER_NORM_EPS)?;
        let q = g.matmul(h, layer.w_q)?;
        let q = g.add_row(q, layer.b_q)?;
        let k = g.matmul(h, layer.w_k)?;
        let k = g.add_row(k, layer.b_k)?;
        let v = g.matmul(h, layer.w_v)?;
        let v = g.add_row(v, layer.b_v)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        let mut probs = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let qh = g.slice_cols(q, head * dh, dh)?;
            let kh = g.slice_cols(k, head * dh, dh)?;
            let vh = g.slice_cols(v, head * dh, dh)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, inv_sqrt);
            let p = g.softmax(scores, Some(mask.additive()))?;
            probs.push(p);
            heads.push(g.matmul(p, vh)?);
        }
        attention.push(probs);
        let att = g.concat_cols(&heads)?;
        let att = g.matmul(att, layer.w_o)?;
        let att = g.add_row(att, layer.b_o)?;
        let att = dropout(g, att, cfg.dropout, &mut dropout_rng)?;
        x = g.add(x, att)?;

        let h = g.layer_norm(x, layer.ln2_gain, layer.ln2_bias, LAYER_NORM_EPS)?;
        let f = g.matmul(h, layer.w_ff1)?;
        let f = g.add_row(f, layer.b_ff1)?;
        let f = g.gelu(f);
        let f = g.matmul(f, layer.w_ff2)?;
        let f = g.add_row(f, layer.b_ff2)?;
        let f = dropout(g, f, cfg.dropout, &mut dropout_rng)?;
        x = g.add(x, f)?;
    }
    let hidden = g.layer_norm(x, params.final_gain, params.final_bias, LAYER_NORM_EPS)?;
    Ok(Encoded { hidden, attention })
}

/// LM logits for selected hidden-state rows.
pub fn lm_logits(
    g: &mut Graph,
    params: &ModelParams<Var>,
    hidden: Var,
    rows: &[usize],
) -> Result<Var, ModelError> {
    let h = g.select_rows(hidden, rows)?;
    Ok(g.matmul(h, params.output_proj)?)
}

/// Checks that `token_ids` ends with `[EMB_1]..[EMB_t]`.
pub fn check_trailing_specials(token_ids: &[u32], t_special: usize) -> Result<(), ModelError> {
    let ok = token_ids.len() >= t_special
        && token_ids[token_ids.len() - t_special..]
            .iter()
            .zip(1..=t_special)
            .all(|(&id, i)| id == emb_id(i));
    if ok {
        Ok(())
    } else {
        Err(ModelError::Contract(format!(
            "input must end with {t_special} embedding tokens"
        )))
    }
}

/// Unit-norm text embedding from the last position, as a `1×d_model` node.
pub fn embed_in_graph(
    g: &mut Graph,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
    token_ids: &[u32],
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<Var, ModelError> {
    check_trailing_specials(token_ids, cfg.t_special)?;
    let mask = super::build_causal_mask(token_ids.len());
    let enc = encode(g, params, cfg, token_ids, &mask, dropout_rng)?;
    let last = g.select_rows(enc.hidden, &[token_ids.len() - 1])?;
    Ok(g.l2_normalize_rows(last)?)
}

/// Materialized outputs of [`forward`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub hidden_states: Tensor,
    pub logits: Tensor,
    /// `[layer][head]` attention probabilities.
    pub attention: Vec<Vec<Tensor>>,
}

/// Inference forward pass: hidden states and LM logits for every position.
pub fn forward(
    token_ids: &[u32],
    mask: &AttentionMask,
    weights: &ModelWeights,
) -> Result<ForwardOutput, ModelError> {
    let mut g = Graph::new();
    let params = bind_params(&mut g, weights, false);
    let enc = encode(&mut g, &params, &weights.config, token_ids, mask, None)?;
    let logits = g.matmul(enc.hidden, params.output_proj)?;
    Ok(ForwardOutput {
        hidden_states: g.value(enc.hidden).clone(),
        logits: g.value(logits).clone(),
        attention: enc
            .attention
            .iter()
            .map(|l| l.iter().map(|&p| g.value(p).clone()).collect())
            .collect(),
    })
}

/// Unit-norm embedding of a formatted text (session or passage).
pub fn embed_text(token_ids: &[u32], weights: &ModelWeights) -> Result<Vec<f64>, ModelError> {
    let mut g = Graph::new();
    let params = bind_params(&mut g, weights, false);
    let e = embed_in_graph(&mut g, &params, &weights.config, token_ids, None)?;
    Ok(g.value(e).data().to_vec())
}

/// Embeds many formatted texts, sharing one bound copy of the weights per
/// chunk of inputs.
pub fn embed_texts(token_lists: &[Vec<u32>], weights: &ModelWeights) -> Result<Vec<Vec<f64>>, ModelError> {
    const CHUNK: usize = 64;
    let mut out = Vec::with_capacity(token_lists.len());
    for chunk in token_lists.chunks(CHUNK) {
        let mut g = Graph::new();
        let params = bind_params(&mut g, weights, false);
        for ids in chunk {
            let e = embed_in_graph(&mut g, &params, &weights.config, ids, None)?;
            out.push(g.value(e).data().to_vec());
        }
    }
    Ok(out)
}

/// Contextualized hidden states of the `t` session special tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionAnchor {
    pub vectors: Vec<Vec<f64>>,
}

pub fn extract_session_anchors(
    seq: &PackedSequence,
    hidden_states: &Tensor,
) -> Result<SessionAnchor, ModelError> {
    if hidden_states.rows() != seq.len() {
        return Err(ModelError::Contract(format!(
            "hidden states have {} rows for a sequence of {}",
            hidden_states.rows(),
            seq.len()
        )));
    }
    Ok(SessionAnchor {
        vectors: seq
            .session_special_range()
            .map(|i| hidden_states.row(i).to_vec())
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_causal_mask, build_session_mask};
    use crate::text::FIRST_WORD_ID;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelWeights {
        let cfg = ModelConfig {
            vocab_size: 40,
            d_model: 16,
            n_layers: 2,
            n_heads: 4,
            d_ff: 32,
            max_seq_len: 64,
            t_special: 2,
            dropout: 0.0,
        };
        ModelWeights::init(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    fn words(n: usize, base: u32) -> Vec<u32> {
        (0..n as u32).map(|i| FIRST_WORD_ID + (base + i) % 20).collect()
    }

    #[test]
    fn single_token_shapes() {
        let w = small();
        let out = forward(&[FIRST_WORD_ID], &build_causal_mask(1), &w).unwrap();
        assert_eq!(out.hidden_states.shape(), &[1, 16]);
        assert_eq!(out.logits.shape(), &[1, 40]);
    }

    #[test]
    fn length_overflow_is_rejected() {
        let w = small();
        let ids = words(65, 0);
        assert!(matches!(
            forward(&ids, &build_causal_mask(65), &w),
            Err(ModelError::Contract(_))
        ));
    }

    #[test]
    fn forward_is_deterministic() {
        let w = small();
        let ids = words(9, 3);
        let m = build_causal_mask(9);
        let a = forward(&ids, &m, &w).unwrap();
        let b = forward(&ids, &m, &w).unwrap();
        assert_eq!(a.hidden_states, b.hidden_states);
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn masked_probabilities_are_exactly_zero() {
        let w = small();
        let mut session = words(5, 0);
        let seq = PackedSequence::from_parts(&session, &words(4, 7), 2);
        session.clear();
        let mask = build_session_mask(&seq);
        let out = forward(seq.token_ids(), &mask, &w).unwrap();
        for layer in &out.attention {
            for p in layer {
                for i in 0..seq.len() {
                    for j in 0..seq.len() {
                        if !mask.allowed(i, j) {
                            assert_eq!(p.get2(i, j), 0.0);
                        }
                    }
                    let s: f64 = p.row(i).iter().sum();
                    assert!((s - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn causal_states_ignore_later_tokens() {
        let w = small();
        let a = words(10, 0);
        let mut b = a.clone();
        b[6] = FIRST_WORD_ID + 19;
        let m = build_causal_mask(10);
        let (ha, hb) = (
            forward(&a, &m, &w).unwrap().hidden_states,
            forward(&b, &m, &w).unwrap().hidden_states,
        );
        for i in 0..6 {
            assert_eq!(ha.row(i), hb.row(i));
        }
        assert_ne!(ha.row(6), hb.row(6));
    }

    #[test]
    fn embed_text_contract() {
        let w = small();
        let mut ids = words(6, 1);
        ids.extend([emb_id(1), emb_id(2)]);
        let e = embed_text(&ids, &w).unwrap();
        let norm: f64 = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        assert_eq!(e, embed_text(&ids, &w).unwrap());

        let mut other = words(6, 9);
        other.extend([emb_id(1), emb_id(2)]);
        let f = embed_text(&other, &w).unwrap();
        let cos: f64 = e.iter().zip(&f).map(|(a, b)| a * b).sum();
        assert!(cos < 1.0 - 1e-9);

        let batch = embed_texts(&[ids.clone(), other.clone()], &w).unwrap();
        assert_eq!(batch, vec![e.clone(), f]);

        assert!(matches!(
            embed_text(&words(6, 1), &w),
            Err(ModelError::Contract(_))
        ));
    }

    #[test]
    fn anchors_are_special_rows() {
        let w = small();
        let seq = PackedSequence::from_parts(&words(2, 0), &words(3, 5), 2);
        let out = forward(seq.token_ids(), &build_session_mask(&seq), &w).unwrap();
        let a = extract_session_anchors(&seq, &out.hidden_states).unwrap();
        assert_eq!(a.vectors.len(), 2);
        assert_eq!(a.vectors[0], out.hidden_states.row(2));
        assert_eq!(a.vectors[1], out.hidden_states.row(3));

        let seq1 = PackedSequence::from_parts(&words(4, 0), &words(3, 5), 1);
        let out1 = forward(seq1.token_ids(), &build_session_mask(&seq1), &w).unwrap();
        let a1 = extract_session_anchors(&seq1, &out1.hidden_states).unwrap();
        assert_eq!(a1.vectors, vec![out1.hidden_states.row(4).to_vec()]);
    }
}
