use std::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::retrieval::{cosine, Candidate, Pool};
use crate::select::{check_pool, Method, SelectedMember, SelectedSet, SelectionStatus};

fn finish(method: Method, pool: &Pool, picks: Vec<usize>, k: usize) -> Result<SelectedSet> {
    let status = if picks.len() < k {
        SelectionStatus::PoolExhausted
    } else {
        SelectionStatus::Complete
    };
    let members = picks
        .into_iter()
        .map(|i| SelectedMember::from_candidate(&pool.candidates[i], i))
        .collect();
    SelectedSet::from_members(method, members, 0.5, status)
}

/// Prefix of the relevance order.
pub fn topk_select(pool: &Pool, k: usize) -> Result<SelectedSet> {
    check_pool(pool)?;
    finish(Method::Topk, pool, (0..k.min(pool.len())).collect(), k)
}

/// Uniform sample without replacement, reproducible from `seed`.
pub fn random_select(pool: &Pool, k: usize, seed: u64) -> Result<SelectedSet> {
    check_pool(pool)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, pool.len(), k.min(pool.len())).into_vec();
    finish(Method::Random, pool, picks, k)
}

/// Higher score first, then higher relevance, then lower id.
fn better(score: f64, c: &Candidate, best: Option<(f64, &Candidate)>) -> bool {
    match best {
        None => true,
        Some((bs, b)) => {
            score
                .total_cmp(&bs)
                .then_with(|| c.relevance.total_cmp(&b.relevance))
                .then_with(|| b.id.cmp(&c.id))
                == Ordering::Greater
        }
    }
}

/// Maximal marginal relevance:
/// `lambda * s(z, e_i) - (1 - lambda) * max_{j in S} s(e_i, e_j)`.
pub fn mmr_select(pool: &Pool, k: usize, lambda_mmr: f64) -> Result<SelectedSet> {
    check_pool(pool)?;
    if !(0.0..=1.0).contains(&lambda_mmr) {
        return Err(Error::InvalidConfig(format!("lambda_mmr must be in [0,1], got {lambda_mmr}")));
    }
    let cands = &pool.candidates;
    let k = k.min(cands.len());
    let mut max_sim = vec![f64::NEG_INFINITY; cands.len()];
    let mut taken = vec![false; cands.len()];
    let mut picks = Vec::with_capacity(k);
    let mut ops = 0u64;
    for _ in 0..k {
        let mut best: Option<(f64, usize)> = None;
        for (i, c) in cands.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let novelty = if picks.is_empty() { 0.0 } else { max_sim[i] };
            let score = lambda_mmr * c.vec_score - (1.0 - lambda_mmr) * novelty;
            if better(score, c, best.map(|(s, j)| (s, &cands[j]))) {
                best = Some((score, i));
            }
        }
        let (_, pick) = best.expect("k is bounded by the pool size");
        taken[pick] = true;
        picks.push(pick);
        for (i, c) in cands.iter().enumerate() {
            if !taken[i] {
                max_sim[i] = max_sim[i].max(cosine(&c.embedding, &cands[pick].embedding)?);
                ops += 1;
            }
        }
    }
    let mut set = finish(Method::Mmr, pool, picks, k)?;
    set.similarity_ops = ops;
    Ok(set)
}

/// Farthest-point traversal under `1 - cosine`, seeded at the most
/// relevant candidate.
pub fn fps_select(pool: &Pool, k: usize) -> Result<SelectedSet> {
    check_pool(pool)?;
    let cands = &pool.candidates;
    let k = k.min(cands.len());
    let seed = (1..cands.len()).fold(0, |b, i| {
        if crate::retrieval::relevance_order(&cands[i], &cands[b]) == Ordering::Less {
            i
        } else {
            b
        }
    });
    let mut taken = vec![false; cands.len()];
    let mut min_dist = vec![f64::INFINITY; cands.len()];
    let mut picks = Vec::with_capacity(k);
    let mut ops = 0u64;
    let mut last = seed;
    for step in 0..k {
        if step > 0 {
            let mut best: Option<usize> = None;
            for i in 0..cands.len() {
                if taken[i] {
                    continue;
                }
                let wins = match best {
                    None => true,
                    Some(b) => min_dist[i]
                        .total_cmp(&min_dist[b])
                        .then_with(|| cands[b].id.cmp(&cands[i].id))
                        == Ordering::Greater,
                };
                if wins {
                    best = Some(i);
                }
            }
            last = best.expect("k is bounded by the pool size");
        }
        taken[last] = true;
        picks.push(last);
        for i in 0..cands.len() {
            if !taken[i] {
                let d = 1.0 - cosine(&cands[i].embedding, &cands[last].embedding)?;
                min_dist[i] = min_dist[i].min(d);
                ops += 1;
            }
        }
    }
    let mut set = finish(Method::Fps, pool, picks, k)?;
    set.similarity_ops = ops;
    Ok(set)
}
