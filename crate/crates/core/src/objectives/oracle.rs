//! Reference evaluation of the session-masked LM loss that never builds the
//! packed mask. The session prefix is run causally while caching keys and
//! values at the special positions; the response is then run as a separate
//! sequence whose attention sees those cached entries plus its own causal
//! prefix. Plain loops only, no graph.

use super::ObjectiveError;
use crate::model::{sinusoidal_positions, ModelWeights, LAYER_NORM_EPS};
use crate::text::PackedSequence;

struct Rows {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl Rows {
    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

fn layer_norm(x: &Rows, gain: &[f64], bias: &[f64]) -> Rows {
    let mut data = Vec::with_capacity(x.data.len());
    for i in 0..x.n {
        let r = x.row(i);
        let mean = r.iter().sum::<f64>() / x.d as f64;
        let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.d as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for k in 0..x.d {
            data.push((r[k] - mean) * inv * gain[k] + bias[k]);
        }
    }
    Rows { n: x.n, d: x.d, data }
}

fn linear(x: &Rows, w: &[f64], b: &[f64], out: usize) -> Rows {
    let mut data = vec![0.0; x.n * out];
    for i in 0..x.n {
        for j in 0..out {
            let mut acc = b[j];
            for k in 0..x.d {
                acc += x.data[i * x.d + k] * w[k * out + j];
            }
            data[i * out + j] = acc;
        }
    }
    Rows { n: x.n, d: out, data }
}

fn gelu(v: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * v * (1.0 + (c * (v + 0.044715 * v * v * v)).tanh())
}

/// Attention of each query row over `keys`/`values`, where query `i` sees the
/// first `visible(i)` key rows.
fn attend(
    q: &Rows,
    keys: &Rows,
    values: &Rows,
    n_heads: usize,
    visible: impl Fn(usize) -> usize,
) -> Rows {
    let d = q.d;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut data = vec![0.0; q.n * d];
    for i in 0..q.n {
        let upto = visible(i);
        for h in 0..n_heads {
            let off = h * dh;
            let scores: Vec<f64> = (0..upto)
                .map(|j| {
                    (0..dh)
                        .map(|k| q.data[i * d + off + k] * keys.data[j * d + off + k])
                        .sum::<f64>()
                        * scale
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                for k in 0..dh {
                    data[i * d + off + k] += e / z * values.data[j * d + off + k];
                }
            }
        }
    }
    Rows { n: q.n, d, data }
}

fn add_into(x: &mut Rows, y: &Rows) {
    for (a, b) in x.data.iter_mut().zip(&y.data) {
        *a += b;
    }
}

fn embed(weights: &ModelWeights, ids: &[u32], offset: usize) -> Rows {
    let d = weights.config.d_model;
    let table = weights.params.token_embedding.data();
    let pos = sinusoidal_positions(offset, ids.len(), d);
    let mut data = Vec::with_capacity(ids.len() * d);
    for (p, &id) in ids.iter().enumerate() {
        let id = id as usize;
        for k in 0..d {
            data.push(table[id * d + k] + pos.data()[p * d + k]);
        }
    }
    Rows { n: ids.len(), d, data }
}

/// Runs the layers over `x`. `cache` supplies per-layer keys and values that
/// every query may see in full, placed before the sequence's own entries.
/// Returns the final-normed states and each layer's own keys and values.
fn run(
    weights: &ModelWeights,
    mut x: Rows,
    cache: Option<&[(Rows, Rows)]>,
) -> (Rows, Vec<(Rows, Rows)>) {
    let cfg = &weights.config;
    let d = cfg.d_model;
    let mut kv = Vec::with_capacity(cfg.n_layers);
    for (li, l) in weights.params.layers.iter().enumerate() {
        let h = layer_norm(&x, l.ln1_gain.data(), l.ln1_bias.data());
        let q = linear(&h, l.w_q.data(), l.b_q.data(), d);
        let k = linear(&h, l.w_k.data(), l.b_k.data(), d);
        let v = linear(&h, l.w_v.data(), l.b_v.data(), d);
        let (keys, values, prefix) = match cache {
            Some(c) => {
                let (ck, cv) = &c[li];
                let mut kd = ck.data.clone();
                kd.extend_from_slice(&k.data);
                let mut vd = cv.data.clone();
                vd.extend_from_slice(&v.data);
                (
                    Rows { n: ck.n + k.n, d, data: kd },
                    Rows { n: cv.n + v.n, d, data: vd },
                    ck.n,
                )
            }
            None => (
                Rows { n: k.n, d, data: k.data.clone() },
                Rows { n: v.n, d, data: v.data.clone() },
                0,
            ),
        };
        let att = attend(&q, &keys, &values, cfg.n_heads, |i| prefix + i + 1);
        let att = linear(&att, l.w_o.data(), l.b_o.data(), d);
        add_into(&mut x, &att);
        let h = layer_norm(&x, l.ln2_gain.data(), l.ln2_bias.data());
        let f = linear(&h, l.w_ff1.data(), l.b_ff1.data(), cfg.d_ff);
        let f = Rows {
            n: f.n,
            d: f.d,
            data: f.data.into_iter().map(gelu).collect(),
        };
        let f = linear(&f, l.w_ff2.data(), l.b_ff2.data(), d);
        add_into(&mut x, &f);
        kv.push((k, v));
    }
    let out = layer_norm(&x, weights.params.final_gain.data(), weights.params.final_bias.data());
    (out, kv)
}

fn nll(weights: &ModelWeights, h: &[f64], target: u32) -> f64 {
    let cfg = &weights.config;
    let w = weights.params.output_proj.data();
    let logits: Vec<f64> = (0..cfg.vocab_size)
        .map(|j| (0..cfg.d_model).map(|k| h[k] * w[k * cfg.vocab_size + j]).sum())
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[target as usize]
}

fn select(rows: &Rows, range: std::ops::Range<usize>) -> Rows {
    Rows {
        n: range.len(),
        d: rows.d,
        data: rows.data[range.start * rows.d..range.end * rows.d].to_vec(),
    }
}

/// Session-masked LM loss computed in two passes, for cross-checking the
/// masked single-pass implementation.
pub fn two_pass_lm_loss_oracle(
    seq: &PackedSequence,
    weights: &ModelWeights,
) -> Result<f64, ObjectiveError> {
    let m = seq.n_response();
    if m == 0 {
        return Err(ObjectiveError::Contract("empty response".into()));
    }
    let specials = seq.session_special_range();
    let (prefix_states, prefix_kv) = run(weights, embed(weights, seq.session_prefix(), 0), None);
    let cache: Vec<(Rows, Rows)> = prefix_kv
        .iter()
        .map(|(k, v)| (select(k, specials.clone()), select(v, specials.clone())))
        .collect();

    let response = seq.response_tokens();
    let mut total = nll(weights, prefix_states.row(specials.end - 1), response[0]);
    if m > 1 {
        let ids = &response[..m - 1];
        let (states, _) = run(weights, embed(weights, ids, specials.end), Some(&cache));
        for i in 0..m - 1 {
            total += nll(weights, states.row(i), response[i + 1]);
        }
    }
    Ok(total / m as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::objectives::{session_masked_lm_loss, LmMask};
    use crate::text::FIRST_WORD_ID;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn weights(seed: u64, t: usize) -> ModelWeights {
        let cfg = ModelConfig {
            vocab_size: 48,
            d_model: 12,
            n_layers: 2,
            n_heads: 3,
            d_ff: 20,
            max_seq_len: 64,
            t_special: t,
            dropout: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = ModelWeights::init(cfg, &mut rng).unwrap();
        // Larger random weights make attention patterns non-trivial.
        for p in w.params.iter_mut() {
            for v in p.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        w
    }

    #[test]
    fn matches_masked_single_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..12 {
            let t = 1 + trial % 3;
            let w = weights(trial as u64, t);
            let n = rng.gen_range(1..10);
            let m = rng.gen_range(1..8);
            let body: Vec<u32> = (0..n).map(|_| FIRST_WORD_ID + rng.gen_range(0..35)).collect();
            let resp: Vec<u32> = (0..m).map(|_| FIRST_WORD_ID + rng.gen_range(0..35)).collect();
            let seq = PackedSequence::from_parts(&body, &resp, t);
            let a = session_masked_lm_loss(&seq, &w, LmMask::Session).unwrap();
            let b = two_pass_lm_loss_oracle(&seq, &w).unwrap();
            assert!((a - b).abs() < 1e-9, "trial {trial}: {a} vs {b}");
        }
    }

    #[test]
    fn causal_variant_disagrees_with_oracle() {
        let w = weights(2, 2);
        let body: Vec<u32> = (0..6).map(|i| FIRST_WORD_ID + i).collect();
        let resp: Vec<u32> = (0..5).map(|i| FIRST_WORD_ID + 20 + i).collect();
        let seq = PackedSequence::from_parts(&body, &resp, 2);
        let a = session_masked_lm_loss(&seq, &w, LmMask::Causal).unwrap();
        let b = two_pass_lm_loss_oracle(&seq, &w).unwrap();
        assert!((a - b).abs() > 1e-6);
    }
}
