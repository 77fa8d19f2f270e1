use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::retrieval::Pool;
use crate::select::objective::{pair_similarity, IncrementalSet};
use crate::select::{
    check_pool, Constraint, Method, SelectedMember, SelectedSet, SelectionConfig, SelectionStatus,
    StepRecord,
};

struct Scored {
    index: usize,
    gain: f64,
    delta_r: f64,
    delta_g: f64,
    delta_d: f64,
}

/// Greedy maximization of `R(S)` under the relevance threshold and the
/// per-label cap.
///
/// Each step adds the feasible candidate with the largest
/// `delta_R + mu * s(z, e_i)`; ties go to higher relevance, then lower id.
/// Candidates keep a running sum `A_i` of clamped similarities to the
/// members, so a step costs one similarity per remaining candidate.
pub fn greedy_select(pool: &Pool, cfg: &SelectionConfig) -> Result<SelectedSet> {
    cfg.validate()?;
    check_pool(pool)?;
    if cfg.k > pool.len() {
        return Err(Error::InvalidConfig(format!(
            "K = {} exceeds pool size {}",
            cfg.k,
            pool.len()
        )));
    }
    let cands = &pool.candidates;
    let eligible: Vec<bool> = cands.iter().map(|c| c.vec_score >= cfg.tau).collect();
    let mut remaining = vec![true; cands.len()];
    let mut sums = vec![0.0; cands.len()];
    let mut state = IncrementalSet::new();
    let mut members = Vec::with_capacity(cfg.k);
    let mut steps = Vec::with_capacity(cfg.k);
    let mut similarity_ops = 0u64;
    let mut status = SelectionStatus::Complete;

    for step in 0..cfg.k {
        let mut best: Option<Scored> = None;
        for i in 0..cands.len() {
            if !remaining[i] || !eligible[i] || state.label_count(&cands[i].label) >= cfg.label_cap {
                continue;
            }
            let delta_g = state.delta_label_diversity(&cands[i].label);
            let delta_d = state.delta_text_diversity(sums[i]);
            let delta_r = cfg.alpha * delta_g + (1.0 - cfg.alpha) * delta_d;
            let scored = Scored {
                index: i,
                gain: delta_r + cfg.mu * cands[i].vec_score,
                delta_r,
                delta_g,
                delta_d,
            };
            let better = match &best {
                None => true,
                Some(b) => {
                    scored
                        .gain
                        .total_cmp(&b.gain)
                        .then_with(|| cands[i].relevance.total_cmp(&cands[b.index].relevance))
                        .then_with(|| cands[b.index].id.cmp(&cands[i].id))
                        == Ordering::Greater
                }
            };
            if better {
                best = Some(scored);
            }
        }

        let Some(pick) = best else {
            status = stop_reason(step, &remaining, &eligible);
            break;
        };
        let chosen = &cands[pick.index];
        remaining[pick.index] = false;
        state.push(&chosen.label, sums[pick.index]);
        members.push(SelectedMember::from_candidate(chosen, pick.index));
        steps.push(StepRecord {
            id: chosen.id.clone(),
            pool_index: pick.index,
            gain: pick.gain,
            delta_r: pick.delta_r,
            delta_g: pick.delta_g,
            delta_d: pick.delta_d,
        });

        if step + 1 < cfg.k {
            for j in 0..cands.len() {
                if remaining[j] && eligible[j] && state.label_count(&cands[j].label) < cfg.label_cap {
                    sums[j] += pair_similarity(&cands[j].embedding, &chosen.embedding)?;
                    similarity_ops += 1;
                }
            }
        }
    }

    Ok(SelectedSet {
        method: Method::Ldra,
        members,
        label_counts: state.label_counts().clone(),
        sum_sq_counts: state.sum_sq_counts(),
        mean_pairwise_sim: state.mean_pairwise_sim(),
        alpha: cfg.alpha,
        g: state.g(),
        dtext: state.d(),
        r: state.r(cfg.alpha),
        steps,
        status,
        similarity_ops,
    })
}

fn stop_reason(step: usize, remaining: &[bool], eligible: &[bool]) -> SelectionStatus {
    let any_eligible_left = remaining.iter().zip(eligible).any(|(&r, &e)| r && e);
    let any_left = remaining.iter().any(|&r| r);
    if step == 0 {
        // The cap cannot bind on an empty set.
        SelectionStatus::Infeasible(Constraint::Threshold)
    } else if any_eligible_left {
        SelectionStatus::CapLimited
    } else if any_left {
        SelectionStatus::ThresholdLimited
    } else {
        SelectionStatus::PoolExhausted
    }
}
