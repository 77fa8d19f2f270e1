use std::collections::BTreeMap;

use itertools::Itertools;

use crate::error::{Error, Result};
use crate::retrieval::Pool;
use crate::select::objective::{mix, pair_similarity};
use crate::select::{
    check_pool, Constraint, Method, SelectedMember, SelectedSet, SelectionConfig, SelectionStatus,
};

/// Largest number of size-K subsets the oracle will enumerate.
pub const ORACLE_SUBSET_LIMIT: u64 = 1_000_000;

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k.min(n));
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Exhaustive arg max of `R` over all feasible size-K subsets of the pool.
/// Ties go to the lexicographically smallest sorted id list.
pub fn brute_force_select(pool: &Pool, cfg: &SelectionConfig) -> Result<SelectedSet> {
    cfg.validate()?;
    check_pool(pool)?;
    let n = pool.len();
    if cfg.k > n {
        return Err(Error::InvalidConfig(format!("K = {} exceeds pool size {n}", cfg.k)));
    }
    if binomial(n, cfg.k) > ORACLE_SUBSET_LIMIT as u128 {
        return Err(Error::CombinatorialGuard {
            pool: n,
            k: cfg.k,
            limit: ORACLE_SUBSET_LIMIT,
        });
    }
    let cands = &pool.candidates;
    let mut sims = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s = pair_similarity(&cands[i].embedding, &cands[j].embedding)?;
            sims[i * n + j] = s;
            sims[j * n + i] = s;
        }
    }
    let eligible: Vec<usize> = (0..n).filter(|&i| cands[i].vec_score >= cfg.tau).collect();

    let mut best: Option<(f64, Vec<&str>, Vec<usize>)> = None;
    let m = cfg.k as f64;
    for subset in eligible.iter().copied().combinations(cfg.k) {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for &i in &subset {
            *counts.entry(cands[i].label.as_str()).or_default() += 1;
        }
        if counts.values().any(|&c| c > cfg.label_cap) {
            continue;
        }
        let g = 1.0 - counts.values().map(|&c| (c as f64 / m).powi(2)).sum::<f64>();
        let d = if cfg.k < 2 {
            1.0
        } else {
            let total: f64 = subset
                .iter()
                .tuple_combinations()
                .map(|(&i, &j)| sims[i * n + j])
                .sum();
            1.0 - total / (m * (m - 1.0) / 2.0)
        };
        let r = mix(g, d, cfg.alpha);
        let mut ids: Vec<&str> = subset.iter().map(|&i| cands[i].id.as_str()).collect();
        ids.sort_unstable();
        let wins = match &best {
            None => true,
            Some((br, bids, _)) => r > *br || (r == *br && ids < *bids),
        };
        if wins {
            best = Some((r, ids, subset));
        }
    }

    match best {
        Some((_, _, subset)) => {
            let members = subset
                .into_iter()
                .map(|i| SelectedMember::from_candidate(&cands[i], i))
                .collect();
            SelectedSet::from_members(Method::Oracle, members, cfg.alpha, SelectionStatus::Complete)
        }
        None => {
            let binding = if eligible.len() < cfg.k {
                Constraint::Threshold
            } else {
                Constraint::LabelCap
            };
            SelectedSet::from_members(
                Method::Oracle,
                Vec::new(),
                cfg.alpha,
                SelectionStatus::Infeasible(binding),
            )
        }
    }
}
