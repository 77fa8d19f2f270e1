//! Hybrid relevance scoring and top-L pool retrieval.
//!
//! Relevance mixes a vector term and a lexical term:
//! `rel = lambda_vec * norm(cos) + (1 - lambda_vec) * norm(bm25)`.
//! Under [`ScoreNormalization::Unit`] cosine is mapped to `[0,1]` by
//! `(s + 1) / 2` and BM25 is min-max scaled over every scanned item, so the
//! two terms live on the same scale before mixing.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};
use crate::memory::{ExactScan, Memory, VectorIndex};

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            id: "cosine operand".into(),
            expected: u.len(),
            got: v.len(),
        });
    }
    let d = norm(u) * norm(v);
    if d == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot(u, v) / d).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreNormalization {
    /// Cosine to `(s+1)/2`, BM25 min-max over scanned items.
    #[default]
    Unit,
    /// Mix raw cosine and raw BM25.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub lambda_vec: f64,
    pub pool_size: usize,
    pub normalization: ScoreNormalization,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            lambda_vec: 0.6,
            pool_size: 128,
            normalization: ScoreNormalization::Unit,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_vec) {
            return Err(Error::InvalidConfig(format!(
                "lambda_vec must be in [0,1], got {}",
                self.lambda_vec
            )));
        }
        if self.pool_size == 0 {
            return Err(Error::InvalidConfig("pool size L must be >= 1".into()));
        }
        Ok(())
    }
}

/// A scored memory item, carrying its component scores for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub text: String,
    pub label: String,
    pub embedding: Vec<f64>,
    pub relevance: f64,
    /// Raw cosine between the encoded query and the exemplar.
    pub vec_score: f64,
    /// Lexical score after normalization.
    pub lex_score: f64,
    /// Raw BM25 before normalization.
    pub bm25: f64,
}

impl Candidate {
    pub fn recompute_relevance(&self, lambda_vec: f64, mode: ScoreNormalization) -> f64 {
        mix(lambda_vec, mode, self.vec_score, self.lex_score)
    }
}

fn mix(lambda_vec: f64, mode: ScoreNormalization, vec_score: f64, lex_score: f64) -> f64 {
    let v = match mode {
        ScoreNormalization::Unit => (vec_score + 1.0) / 2.0,
        ScoreNormalization::Raw => vec_score,
    };
    lambda_vec * v + (1.0 - lambda_vec) * lex_score
}

/// Relevance descending, then id ascending.
pub(crate) fn relevance_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.relevance
        .total_cmp(&a.relevance)
        .then_with(|| a.id.cmp(&b.id))
}

/// The ordered candidate pool `S_L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pool {
    pub candidates: Vec<Candidate>,
    pub lambda_vec: f64,
    pub normalization: ScoreNormalization,
}

impl Pool {
    /// Builds a pool from externally scored candidates, sorting them into
    /// relevance order.
    pub fn from_candidates(
        mut candidates: Vec<Candidate>,
        lambda_vec: f64,
        normalization: ScoreNormalization,
    ) -> Self {
        candidates.sort_by(relevance_order);
        Self {
            candidates,
            lambda_vec,
            normalization,
        }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// The first `l` candidates, which is the pool a smaller `L` would return.
    pub fn truncated(&self, l: usize) -> Pool {
        Pool {
            candidates: self.candidates[..l.min(self.len())].to_vec(),
            lambda_vec: self.lambda_vec,
            normalization: self.normalization,
        }
    }
}

pub fn retrieve_pool(
    memory: &Memory,
    query_vec: &[f64],
    query_text: &str,
    cfg: &RetrievalConfig,
) -> Result<Pool> {
    retrieve_pool_with(&ExactScan, memory, query_vec, query_text, cfg)
}

pub fn retrieve_pool_with(
    index: &dyn VectorIndex,
    memory: &Memory,
    query_vec: &[f64],
    query_text: &str,
    cfg: &RetrievalConfig,
) -> Result<Pool> {
    cfg.validate()?;
    if memory.is_empty() {
        return Err(Error::InvalidInput("memory is empty".into()));
    }
    let sims = index.similarities(memory, query_vec)?;
    let bm25 = memory.bm25_all(query_text);
    let lex = match cfg.normalization {
        ScoreNormalization::Unit => min_max(&bm25),
        ScoreNormalization::Raw => bm25.clone(),
    };

    let mut order: Vec<(f64, usize)> = (0..memory.len())
        .map(|i| (mix(cfg.lambda_vec, cfg.normalization, sims[i], lex[i]), i))
        .collect();
    let by_rel = |a: &(f64, usize), b: &(f64, usize)| {
        b.0.total_cmp(&a.0)
            .then_with(|| memory.get(a.1).id.cmp(&memory.get(b.1).id))
    };
    let l = cfg.pool_size.min(order.len());
    if l < order.len() {
        order.select_nth_unstable_by(l - 1, by_rel);
        order.truncate(l);
    }
    order.sort_by(by_rel);

    let candidates = order
        .into_iter()
        .map(|(relevance, i)| {
            let ex = memory.get(i);
            Candidate {
                id: ex.id.clone(),
                text: ex.text.clone(),
                label: ex.label.clone(),
                embedding: ex.embedding.clone(),
                relevance,
                vec_score: sims[i],
                lex_score: lex[i],
                bm25: bm25[i],
            }
        })
        .collect();
    Ok(Pool {
        candidates,
        lambda_vec: cfg.lambda_vec,
        normalization: cfg.normalization,
    })
}

/// Min-max scaling to `[0,1]`; an all-equal input maps to 0.5.
fn min_max(xs: &[f64]) -> Vec<f64> {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![0.5; xs.len()];
    }
    xs.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{Bm25Params, Exemplar, FlatIndex};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_basics() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroVector)));
    }

    #[test]
    fn mixing_arithmetic() {
        // normalized vec 0.8 corresponds to raw cosine 0.6
        let r = mix(0.6, ScoreNormalization::Unit, 0.6, 0.5);
        assert!((r - 0.68).abs() < 1e-12);
    }

    #[test]
    fn min_max_degenerate() {
        assert_eq!(min_max(&[2.0, 2.0]), vec![0.5, 0.5]);
        assert_eq!(min_max(&[0.0, 1.0, 2.0]), vec![0.0, 0.5, 1.0]);
    }

    fn random_memory(seed: u64, n: usize, d: usize) -> Memory {
        let words = ["taxi", "hotel", "book", "cheap", "train", "table", "north", "park", "now", "please"];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = (0..n)
            .map(|i| {
                let text = (0..rng.random_range(2..7))
                    .map(|_| words[rng.random_range(0..words.len())])
                    .collect::<Vec<_>>()
                    .join(" ");
                Exemplar {
                    id: format!("e{i:03}"),
                    text,
                    label: format!("l{}", i % 5),
                    embedding: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                }
            })
            .collect::<Vec<_>>();
        Memory::ingest(records, Bm25Params::default()).unwrap()
    }

    #[test]
    fn degenerate_mixtures_follow_single_signal() {
        let m = random_memory(7, 40, 6);
        let q = [0.3, 0.1, -0.5, 0.2, 0.9, -0.1];
        let text = "book a cheap taxi";
        let cfg = |lambda_vec| RetrievalConfig { lambda_vec, pool_size: 40, ..Default::default() };

        let by_vec = retrieve_pool(&m, &q, text, &cfg(1.0)).unwrap();
        let sims = ExactScan.similarities(&m, &q).unwrap();
        let mut expect: Vec<usize> = (0..m.len()).collect();
        expect.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(m.get(a).id.cmp(&m.get(b).id)));
        let got: Vec<&str> = by_vec.candidates.iter().map(|c| c.id.as_str()).collect();
        let want: Vec<&str> = expect.iter().map(|&i| m.get(i).id.as_str()).collect();
        assert_eq!(got, want);

        let by_lex = retrieve_pool(&m, &q, text, &cfg(0.0)).unwrap();
        let bm = m.bm25_all(text);
        let mut expect: Vec<usize> = (0..m.len()).collect();
        expect.sort_by(|&a, &b| bm[b].total_cmp(&bm[a]).then(m.get(a).id.cmp(&m.get(b).id)));
        let got: Vec<&str> = by_lex.candidates.iter().map(|c| c.id.as_str()).collect();
        let want: Vec<&str> = expect.iter().map(|&i| m.get(i).id.as_str()).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn pool_size_and_recomputation() {
        let m = random_memory(3, 25, 4);
        let cfg = RetrievalConfig { pool_size: 10, ..Default::default() };
        let pool = retrieve_pool(&m, &[1.0, 0.2, 0.0, -0.3], "train north", &cfg).unwrap();
        assert_eq!(pool.len(), 10);
        for c in &pool.candidates {
            assert_eq!(c.recompute_relevance(cfg.lambda_vec, cfg.normalization), c.relevance);
        }
        let big = RetrievalConfig { pool_size: 1000, ..Default::default() };
        let all = retrieve_pool(&m, &[1.0, 0.2, 0.0, -0.3], "train north", &big).unwrap();
        assert_eq!(all.len(), 25);
        assert_eq!(all.truncated(10), pool);
    }

    #[test]
    fn rejects_bad_config() {
        let m = random_memory(1, 5, 3);
        let cfg = RetrievalConfig { lambda_vec: 1.5, ..Default::default() };
        assert!(retrieve_pool(&m, &[1.0, 0.0, 0.0], "x", &cfg).is_err());
        let cfg = RetrievalConfig { pool_size: 0, ..Default::default() };
        assert!(retrieve_pool(&m, &[1.0, 0.0, 0.0], "x", &cfg).is_err());
    }

    proptest! {
        #[test]
        fn deterministic_and_index_agnostic(seed in 0u64..500, l in 1usize..30) {
            let m = random_memory(seed, 30, 5);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let q: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let cfg = RetrievalConfig { pool_size: l, ..Default::default() };
            let a = retrieve_pool(&m, &q, "cheap hotel north", &cfg).unwrap();
            let b = retrieve_pool(&m, &q, "cheap hotel north", &cfg).unwrap();
            let flat = FlatIndex::build(&m);
            let c = retrieve_pool_with(&flat, &m, &q, "cheap hotel north", &cfg).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(&a, &c);
        }

        #[test]
        fn raising_vec_score_never_lowers_rank(seed in 0u64..300, pick in 0usize..20, bump in 0.0f64..1.0) {
            let m = random_memory(seed, 20, 4);
            let cfg = RetrievalConfig { pool_size: 20, lambda_vec: 0.6, ..Default::default() };
            let pool = retrieve_pool(&m, &[0.5, -0.5, 0.1, 0.7], "book table", &cfg).unwrap();
            let target = pool.candidates[pick].id.clone();
            let mut cands = pool.candidates.clone();
            let c = cands.iter_mut().find(|c| c.id == target).unwrap();
            c.vec_score = (c.vec_score + bump).min(1.0);
            c.relevance = c.recompute_relevance(cfg.lambda_vec, cfg.normalization);
            let bumped = Pool::from_candidates(cands, cfg.lambda_vec, cfg.normalization);
            let new_rank = bumped.candidates.iter().position(|c| c.id == target).unwrap();
            prop_assert!(new_rank <= pick);
        }
    }
}
