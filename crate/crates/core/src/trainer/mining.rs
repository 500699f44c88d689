//! Hard-negative mining: retrieve with the session embedding and draw
//! uniformly from a band of mid-ranked results.

use std::collections::HashMap;

use rand::seq::index::sample as sample_indices;

use super::{prepare_samples, sub_rng, train_steps, TraceRow, TrainConfig, TrainError, TrainState};
use crate::index::{build_index, EmbeddingIndex};
use crate::model::{Retriever, TextEmbedder};
use crate::text::{Passage, TrainingSample, Vocabulary};

const MINING_DOMAIN: u64 = 0x4d49_4e45;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MiningConfig {
    /// Lowest 1-based rank that may be drawn.
    pub window_lo: usize,
    /// Highest 1-based rank that may be drawn.
    pub window_hi: usize,
    pub k_per_sample: usize,
    pub seed: u64,
}

impl MiningConfig {
    pub fn new(k_per_sample: usize, seed: u64) -> Self {
        Self {
            window_lo: 15,
            window_hi: 30,
            k_per_sample,
            seed,
        }
    }

    /// The window actually used for a corpus of `n` passages. When the
    /// corpus is smaller than `window_hi`, both ends scale down by
    /// `n / window_hi` so the band keeps its relative position.
    pub fn effective_window(&self, n: usize) -> (usize, usize) {
        if n >= self.window_hi {
            return (self.window_lo, self.window_hi);
        }
        let lo = (self.window_lo * n).div_ceil(self.window_hi).max(1);
        (lo.min(n.max(1)), n.max(1))
    }
}

/// Ranks and pids drawn for one sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MinedDraw {
    pub ranks: Vec<usize>,
    pub pids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiningOutcome {
    /// Input samples with `hard_negatives` replaced by the draws.
    pub samples: Vec<TrainingSample>,
    pub draws: Vec<MinedDraw>,
    pub window: (usize, usize),
}

pub fn mine_hard_negatives(
    samples: &[TrainingSample],
    corpus: &[Passage],
    index: &EmbeddingIndex,
    embedder: &dyn TextEmbedder,
    cfg: &MiningConfig,
) -> Result<MiningOutcome, TrainError> {
    if cfg.window_lo == 0 || cfg.window_lo > cfg.window_hi || cfg.k_per_sample == 0 {
        return Err(TrainError::Config(format!(
            "invalid mining window [{}, {}] with k={}",
            cfg.window_lo, cfg.window_hi, cfg.k_per_sample
        )));
    }
    if index.is_empty() {
        return Err(TrainError::Config("cannot mine from an empty index".into()));
    }
    let window = cfg.effective_window(index.len());
    if window != (cfg.window_lo, cfg.window_hi) {
        log::warn!(
            "corpus of {} passages is smaller than rank {}; mining window shrunk to [{}, {}]",
            index.len(),
            cfg.window_hi,
            window.0,
            window.1
        );
    }
    let by_pid: HashMap<&str, &Passage> = corpus.iter().map(|p| (p.pid.as_str(), p)).collect();
    let sessions: Vec<_> = samples.iter().map(|s| s.session.clone()).collect();
    let queries = embedder.embed_sessions(&sessions)?;
    let mut out = Vec::with_capacity(samples.len());
    let mut draws = Vec::with_capacity(samples.len());
    let mut short = 0usize;
    for (i, (sample, q)) in samples.iter().zip(&queries).enumerate() {
        let hits = index.search_topk(q, window.1)?.hits;
        let candidates: Vec<_> = hits
            .iter()
            .filter(|h| h.rank >= window.0 && h.pid != sample.positive.pid)
            .collect();
        let k = cfg.k_per_sample.min(candidates.len());
        if k < cfg.k_per_sample {
            short += 1;
        }
        let mut rng = sub_rng(cfg.seed, MINING_DOMAIN, i as u64);
        let picked: Vec<_> = sample_indices(&mut rng, candidates.len(), k)
            .into_iter()
            .map(|j| candidates[j])
            .collect();
        let mut negatives = Vec::with_capacity(k);
        for h in &picked {
            let p = by_pid.get(h.pid.as_str()).ok_or_else(|| {
                TrainError::Config(format!("index pid {} is missing from the corpus", h.pid))
            })?;
            negatives.push((*p).clone());
        }
        draws.push(MinedDraw {
            ranks: picked.iter().map(|h| h.rank).collect(),
            pids: picked.iter().map(|h| h.pid.clone()).collect(),
        });
        out.push(TrainingSample {
            session: sample.session.clone(),
            positive: sample.positive.clone(),
            hard_negatives: negatives,
        });
    }
    if short > 0 {
        log::warn!(
            "{short} samples had fewer than {} candidates in the window",
            cfg.k_per_sample
        );
    }
    Ok(MiningOutcome {
        samples: out,
        draws,
        window,
    })
}

/// Trains to `cfg.steps`. With `cfg.remine_every > 0`, training pauses every
/// `remine_every` steps, rebuilds the index with the current weights and
/// redraws each sample's hard negatives before continuing.
pub fn train_with_remining(
    state: &mut TrainState,
    samples: &[TrainingSample],
    corpus: &[Passage],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&TrainState, &TraceRow) -> Result<(), TrainError>,
) -> Result<Vec<TraceRow>, TrainError> {
    let template = state.weights.config.template();
    let with_lm = cfg.objective().lm_enabled();
    let mut current = samples.to_vec();
    let mut trace = Vec::new();
    while state.step < cfg.steps {
        if cfg.remine_every > 0 && state.step > 0 && state.step % cfg.remine_every == 0 {
            let retriever = Retriever::new(state.weights.clone(), vocab.clone())?;
            let index = build_index(corpus, &retriever)?;
            let mining = cfg.mining(state.step as u64);
            current = mine_hard_negatives(samples, corpus, &index, &retriever, &mining)?.samples;
            log::info!("re-mined hard negatives at step {}", state.step);
        }
        let until = if cfg.remine_every > 0 {
            (state.step / cfg.remine_every + 1) * cfg.remine_every
        } else {
            cfg.steps
        };
        let (data, _) = prepare_samples(&current, vocab, &template, with_lm)?;
        trace.extend(train_steps(state, &data, cfg, until.min(cfg.steps), &mut on_step)?);
    }
    Ok(trace)
}
