//! Flat dense index over a passage corpus with exact top-k cosine search and
//! a compact binary file format.

mod store;

pub use store::{load_index, save_index, INDEX_MAGIC, INDEX_VERSION};

use std::cmp::Ordering;
use std::collections::HashSet;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::model::{ModelError, TextEmbedder};
use crate::text::Passage;

const UNIT_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IndexMetadata {
    /// Fingerprint of the encoder that produced the vectors.
    pub encoder_hash: [u8; 32],
    /// Build time, seconds since the Unix epoch.
    pub built_at: u64,
}

impl IndexMetadata {
    pub fn now(encoder_hash: [u8; 32]) -> Self {
        let built_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            encoder_hash,
            built_at,
        }
    }

    pub fn encoder_hash_hex(&self) -> String {
        self.encoder_hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Unit vectors stored as `f32`, one per passage, in corpus order.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    dim: usize,
    pids: Vec<String>,
    vectors: Vec<f32>,
    metadata: IndexMetadata,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SearchHit {
    pub pid: String,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SearchResult {
    pub hits: Vec<SearchHit>,
}

impl SearchResult {
    pub fn pids(&self) -> Vec<&str> {
        self.hits.iter().map(|h| h.pid.as_str()).collect()
    }
}

impl EmbeddingIndex {
    /// Builds an index from `(pid, vector)` pairs. Vectors must be unit norm
    /// and pids unique.
    pub fn from_vectors(
        dim: usize,
        entries: impl IntoIterator<Item = (String, Vec<f64>)>,
        metadata: IndexMetadata,
    ) -> Result<Self, IndexError> {
        if dim == 0 {
            return Err(IndexError::Contract("dimension must be positive".into()));
        }
        let mut seen = HashSet::new();
        let mut pids = Vec::new();
        let mut vectors = Vec::new();
        for (pid, v) in entries {
            if v.len() != dim {
                return Err(IndexError::Contract(format!(
                    "{pid}: vector of dimension {} in a {dim}-dimensional index",
                    v.len()
                )));
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOL {
                return Err(IndexError::Contract(format!(
                    "{pid}: vector norm {norm} is not 1"
                )));
            }
            if !seen.insert(pid.clone()) {
                return Err(IndexError::Contract(format!("duplicate pid {pid}")));
            }
            pids.push(pid);
            vectors.extend(v.iter().map(|&x| x as f32));
        }
        Ok(Self {
            dim,
            pids,
            vectors,
            metadata,
        })
    }

    pub(crate) fn from_raw(
        dim: usize,
        pids: Vec<String>,
        vectors: Vec<f32>,
        metadata: IndexMetadata,
    ) -> Self {
        Self {
            dim,
            pids,
            vectors,
            metadata,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.pids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pids.is_empty()
    }

    pub fn pids(&self) -> &[String] {
        &self.pids
    }

    pub fn metadata(&self) -> &IndexMetadata {
        &self.metadata
    }

    pub(crate) fn raw_vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Cosine scores of `query` against every entry, in index order.
    pub fn scores(&self, query: &[f64]) -> Result<Vec<f64>, IndexError> {
        if query.len() != self.dim {
            return Err(IndexError::Contract(format!(
                "query of dimension {} against a {}-dimensional index",
                query.len(),
                self.dim
            )));
        }
        let qn = query.iter().map(|x| x * x).sum::<f64>().sqrt();
        if qn == 0.0 || !qn.is_finite() {
            return Err(IndexError::Contract("query has no direction".into()));
        }
        Ok((0..self.len())
            .map(|i| {
                let v = self.vector(i);
                let mut dot = 0.0;
                let mut vn = 0.0;
                for (&a, &b) in query.iter().zip(v) {
                    let b = b as f64;
                    dot += a * b;
                    vn += b * b;
                }
                (dot / (qn * vn.sqrt())).clamp(-1.0, 1.0)
            })
            .collect())
    }

    /// Exact top-`k` by cosine, ties broken by ascending pid.
    pub fn search_topk(&self, query: &[f64], k: usize) -> Result<SearchResult, IndexError> {
        if k == 0 {
            return Err(IndexError::Contract("k must be at least 1".into()));
        }
        let scores = self.scores(query)?;
        let mut order: Vec<usize> = (0..self.len()).collect();
        let cmp = |&a: &usize, &b: &usize| -> Ordering {
            scores[b]
                .total_cmp(&scores[a])
                .then_with(|| self.pids[a].cmp(&self.pids[b]))
        };
        let k = k.min(order.len());
        if k < order.len() {
            order.select_nth_unstable_by(k, cmp);
            order.truncate(k);
        }
        order.sort_by(cmp);
        Ok(SearchResult {
            hits: order
                .into_iter()
                .enumerate()
                .map(|(r, i)| SearchHit {
                    pid: self.pids[i].clone(),
                    score: scores[i],
                    rank: r + 1,
                })
                .collect(),
        })
    }
}

/// Embeds every passage with `embedder`, in corpus order.
pub fn build_index(corpus: &[Passage], embedder: &dyn TextEmbedder) -> Result<EmbeddingIndex, IndexError> {
    if corpus.is_empty() {
        return Err(IndexError::Contract("empty corpus".into()));
    }
    let texts: Vec<&str> = corpus.iter().map(|p| p.text.as_str()).collect();
    let vectors = match embedder.embed_passages(&texts) {
        Ok(v) => v,
        Err(_) => {
            // Re-run one by one to name the failing passage.
            let mut out = Vec::with_capacity(corpus.len());
            for p in corpus {
                out.push(embedder.embed_passage(&p.text).map_err(|source| IndexError::Embed {
                    pid: p.pid.clone(),
                    source,
                })?);
            }
            out
        }
    };
    EmbeddingIndex::from_vectors(
        embedder.dim(),
        corpus.iter().map(|p| p.pid.clone()).zip(vectors),
        IndexMetadata::now(embedder.fingerprint()),
    )
}

/// Convenience wrapper over [`EmbeddingIndex::search_topk`].
pub fn search_topk(query: &[f64], index: &EmbeddingIndex, k: usize) -> Result<SearchResult, IndexError> {
    index.search_topk(query, k)
}

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("failed to embed passage {pid}: {source}")]
    Embed {
        pid: String,
        #[source]
        source: ModelError,
    },
    #[error("malformed index file: {0}")]
    Format(String),
    #[error("index file version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LexicalEmbedder;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn meta() -> IndexMetadata {
        IndexMetadata {
            encoder_hash: [7; 32],
            built_at: 1,
        }
    }

    fn random_index(n: usize, dim: usize, seed: u64) -> EmbeddingIndex {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EmbeddingIndex::from_vectors(
            dim,
            (0..n).map(|i| (format!("p{i:04}"), random_unit(&mut rng, dim))),
            meta(),
        )
        .unwrap()
    }

    /// Full descending sort of every score, pid ascending on ties.
    fn oracle(index: &EmbeddingIndex, q: &[f64], k: usize) -> Vec<(String, f64)> {
        let mut all: Vec<(String, f64)> = index
            .pids()
            .iter()
            .enumerate()
            .map(|(i, pid)| {
                let v: Vec<f64> = index.vector(i).iter().map(|&x| x as f64).collect();
                let dot: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
                let nq: f64 = q.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nv: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                (pid.clone(), dot / (nq * nv))
            })
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn matches_full_sort_on_1000_vectors() {
        let index = random_index(1000, 16, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in [1, 3, 10, 100, 1000] {
            let q = random_unit(&mut rng, 16);
            let got = index.search_topk(&q, k).unwrap();
            let want = oracle(&index, &q, k);
            assert_eq!(got.hits.len(), want.len());
            for (r, (h, (pid, score))) in got.hits.iter().zip(&want).enumerate() {
                assert_eq!(&h.pid, pid);
                assert!((h.score - score).abs() < 1e-12);
                assert_eq!(h.rank, r + 1);
            }
        }
    }

    #[test]
    fn stored_vector_is_its_own_top_hit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vs: Vec<Vec<f64>> = (0..20).map(|_| random_unit(&mut rng, 8)).collect();
        let index = EmbeddingIndex::from_vectors(
            8,
            vs.iter().enumerate().map(|(i, v)| (format!("d{i}"), v.clone())),
            meta(),
        )
        .unwrap();
        for (i, v) in vs.iter().enumerate() {
            let r = index.search_topk(v, 3).unwrap();
            assert_eq!(r.hits[0].pid, format!("d{i}"));
            assert!((r.hits[0].score - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn k_larger_than_corpus_returns_everything() {
        let index = random_index(5, 4, 4);
        let r = index.search_topk(&[1.0, 0.0, 0.0, 0.0], 50).unwrap();
        assert_eq!(r.hits.len(), 5);
        assert!(r.hits.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn ties_break_by_pid() {
        let v = vec![1.0, 0.0];
        let index = EmbeddingIndex::from_vectors(
            2,
            [("b".to_string(), v.clone()), ("a".into(), v.clone()), ("c".into(), vec![0.0, 1.0])],
            meta(),
        )
        .unwrap();
        assert_eq!(index.search_topk(&v, 3).unwrap().pids(), vec!["a", "b", "c"]);
    }

    #[test]
    fn contract_errors() {
        let index = random_index(5, 4, 5);
        assert!(matches!(index.search_topk(&[1.0, 0.0], 1), Err(IndexError::Contract(_))));
        assert!(matches!(index.search_topk(&[1.0, 0.0, 0.0, 0.0], 0), Err(IndexError::Contract(_))));
        let dup = EmbeddingIndex::from_vectors(
            2,
            [("a".to_string(), vec![1.0, 0.0]), ("a".into(), vec![0.0, 1.0])],
            meta(),
        );
        assert!(matches!(dup, Err(IndexError::Contract(_))));
        let not_unit = EmbeddingIndex::from_vectors(2, [("a".to_string(), vec![2.0, 0.0])], meta());
        assert!(matches!(not_unit, Err(IndexError::Contract(_))));
    }

    #[test]
    fn build_over_a_corpus() {
        let corpus = vec![
            Passage::new("a", "tea prices rose"),
            Passage::new("b", "the history of rome"),
            Passage::new("c", "coffee costs more"),
        ];
        let emb = LexicalEmbedder { dim: 32 };
        let index = build_index(&corpus, &emb).unwrap();
        assert_eq!(index.len(), 3);
        assert_eq!(index.pids(), ["a", "b", "c"]);
        let again = build_index(&corpus, &emb).unwrap();
        assert_eq!(index.raw_vectors(), again.raw_vectors());
        assert!(build_index(&[], &emb).is_err());
    }

    #[test]
    fn permuted_corpus_gives_identical_results() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut entries: Vec<(String, Vec<f64>)> =
            (0..300).map(|i| (format!("p{i}"), random_unit(&mut rng, 8))).collect();
        // Exact duplicates exercise the tie-break.
        for i in 0..20 {
            entries.push((format!("dup{i}"), entries[i].1.clone()));
        }
        let a = EmbeddingIndex::from_vectors(8, entries.clone(), meta()).unwrap();
        use rand::seq::SliceRandom;
        entries.shuffle(&mut rng);
        let b = EmbeddingIndex::from_vectors(8, entries, meta()).unwrap();
        for _ in 0..20 {
            let q = random_unit(&mut rng, 8);
            assert_eq!(a.search_topk(&q, 25).unwrap(), b.search_topk(&q, 25).unwrap());
        }
    }

    proptest! {
        #[test]
        fn scores_bounded_and_sorted(seed in 0u64..1000, k in 1usize..40) {
            let index = random_index(30, 6, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let q = random_unit(&mut rng, 6);
            let r = index.search_topk(&q, k).unwrap();
            prop_assert_eq!(r.hits.len(), k.min(30));
            for w in r.hits.windows(2) {
                prop_assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].pid < w[1].pid));
            }
            for h in &r.hits {
                prop_assert!(h.score.abs() <= 1.0 + 1e-9);
            }
        }
    }
}
