//! Exemplar subset selection over a retrieved pool.
//!
//! The main selector is a constrained greedy maximizer of the diversity
//! objective `R(S)` (see [`objective`]). Similarity Top-K, MMR,
//! farthest-point, seeded random and an exhaustive oracle are provided for
//! comparison.

mod baselines;
mod greedy;
pub mod objective;
mod oracle;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use baselines::{fps_select, mmr_select, random_select, topk_select};
pub use greedy::greedy_select;
pub use oracle::{brute_force_select, ORACLE_SUBSET_LIMIT};

use crate::error::{Error, Result};
use crate::retrieval::{Candidate, Pool};
use objective::{mean_pairwise_similarity, set_scores};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub alpha: f64,
    pub k: usize,
    pub tau: f64,
    pub label_cap: usize,
    pub mu: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            k: 4,
            tau: 0.4,
            label_cap: 1,
            mu: 0.05,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        objective::check_alpha(self.alpha)?;
        if self.k == 0 {
            return Err(Error::InvalidConfig("K must be >= 1".into()));
        }
        if self.label_cap == 0 {
            return Err(Error::InvalidConfig("label cap U must be >= 1".into()));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::InvalidConfig("mu must be >= 0".into()));
        }
        if !self.tau.is_finite() {
            return Err(Error::InvalidConfig("tau must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ldra,
    Topk,
    Mmr,
    Fps,
    Random,
    Oracle,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Ldra,
        Method::Topk,
        Method::Mmr,
        Method::Fps,
        Method::Random,
        Method::Oracle,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Ldra => "ldra",
            Method::Topk => "topk",
            Method::Mmr => "mmr",
            Method::Fps => "fps",
            Method::Random => "random",
            Method::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown selection method `{s}`")))
    }
}

/// Constraint named when selection stops early.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    /// Relevance threshold `tau`.
    Threshold,
    /// Per-label cap `U`.
    LabelCap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "binding")]
pub enum SelectionStatus {
    Complete,
    /// Stopped before K because every remaining relevant item hit the cap.
    CapLimited,
    /// Stopped before K because no remaining item passes the threshold.
    ThresholdLimited,
    /// Stopped before K because the pool ran out.
    PoolExhausted,
    /// Nothing could be selected at all.
    Infeasible(Constraint),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedMember {
    pub id: String,
    pub text: String,
    pub label: String,
    pub embedding: Vec<f64>,
    pub vec_score: f64,
    pub relevance: f64,
    /// Position in the pool, when the member came from one.
    pub pool_index: Option<usize>,
}

impl SelectedMember {
    pub fn from_candidate(c: &Candidate, pool_index: usize) -> Self {
        Self {
            id: c.id.clone(),
            text: c.text.clone(),
            label: c.label.clone(),
            embedding: c.embedding.clone(),
            vec_score: c.vec_score,
            relevance: c.relevance,
            pool_index: Some(pool_index),
        }
    }
}

/// Per-step audit record of the greedy selector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub id: String,
    pub pool_index: usize,
    /// `delta_r + mu * s(z, e_i)`.
    pub gain: f64,
    pub delta_r: f64,
    pub delta_g: f64,
    pub delta_d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedSet {
    pub method: Method,
    pub members: Vec<SelectedMember>,
    pub label_counts: BTreeMap<String, usize>,
    pub sum_sq_counts: u64,
    pub mean_pairwise_sim: f64,
    pub alpha: f64,
    pub g: f64,
    pub dtext: f64,
    pub r: f64,
    pub steps: Vec<StepRecord>,
    pub status: SelectionStatus,
    /// Pairwise exemplar similarities computed while selecting.
    pub similarity_ops: u64,
}

impl SelectedSet {
    /// Builds a set from chosen members, computing every score from scratch.
    pub fn from_members(
        method: Method,
        members: Vec<SelectedMember>,
        alpha: f64,
        status: SelectionStatus,
    ) -> Result<Self> {
        let labels: Vec<&str> = members.iter().map(|m| m.label.as_str()).collect();
        let embs: Vec<&[f64]> = members.iter().map(|m| m.embedding.as_slice()).collect();
        let (g, dtext, r) = set_scores(&labels, &embs, alpha)?;
        let mut label_counts: BTreeMap<String, usize> = BTreeMap::new();
        for l in &labels {
            *label_counts.entry(l.to_string()).or_default() += 1;
        }
        let sum_sq_counts = label_counts.values().map(|&n| (n * n) as u64).sum();
        Ok(Self {
            method,
            mean_pairwise_sim: mean_pairwise_similarity(&embs)?,
            members,
            label_counts,
            sum_sq_counts,
            alpha,
            g,
            dtext,
            r,
            steps: Vec::new(),
            status,
            similarity_ops: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.members.iter().map(|m| m.id.as_str()).collect()
    }

    pub fn labels(&self) -> Vec<&str> {
        self.members.iter().map(|m| m.label.as_str()).collect()
    }

    /// Recomputes `(G, D, R)` from the members.
    pub fn rescore(&self) -> Result<(f64, f64, f64)> {
        let labels = self.labels();
        let embs: Vec<&[f64]> = self.members.iter().map(|m| m.embedding.as_slice()).collect();
        set_scores(&labels, &embs, self.alpha)
    }

    /// Checks the stored bookkeeping against the members and the constraints.
    pub fn check_invariants(&self, cfg: Option<&SelectionConfig>) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidInput(format!("selected-set invariant: {msg}")));
        if self.label_counts.values().sum::<usize>() != self.members.len() {
            return fail("label counts do not sum to the member count".into());
        }
        let ssq: u64 = self.label_counts.values().map(|&n| (n * n) as u64).sum();
        if ssq != self.sum_sq_counts {
            return fail("sum of squared counts is stale".into());
        }
        let (g, d, r) = self.rescore()?;
        for (name, stored, fresh) in [("G", self.g, g), ("D", self.dtext, d), ("R", self.r, r)] {
            if (stored - fresh).abs() > 1e-9 {
                return fail(format!("{name} = {stored} but recomputes to {fresh}"));
            }
        }
        if let Some(cfg) = cfg {
            if let Some((l, n)) = self.label_counts.iter().find(|(_, &n)| n > cfg.label_cap) {
                return fail(format!("label `{l}` appears {n} times, cap is {}", cfg.label_cap));
            }
            if let Some(m) = self.members.iter().find(|m| m.vec_score < cfg.tau) {
                return fail(format!("`{}` has relevance {} below tau {}", m.id, m.vec_score, cfg.tau));
            }
        }
        Ok(())
    }
}

/// Extra knobs for the comparison selectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineParams {
    pub lambda_mmr: f64,
    pub seed: u64,
}

impl Default for BaselineParams {
    fn default() -> Self {
        Self {
            lambda_mmr: 0.5,
            seed: 0,
        }
    }
}

/// Runs one of the selectors on `pool`.
pub fn select(pool: &Pool, method: Method, cfg: &SelectionConfig, params: &BaselineParams) -> Result<SelectedSet> {
    let mut set = match method {
        Method::Ldra => return greedy_select(pool, cfg),
        Method::Oracle => return brute_force_select(pool, cfg),
        Method::Topk => topk_select(pool, cfg.k)?,
        Method::Mmr => mmr_select(pool, cfg.k, params.lambda_mmr)?,
        Method::Fps => fps_select(pool, cfg.k)?,
        Method::Random => random_select(pool, cfg.k, params.seed)?,
    };
    // Baselines report R under the configured mixture for comparability.
    let (g, d, r) = set.rescore_with(cfg.alpha)?;
    set.alpha = cfg.alpha;
    set.g = g;
    set.dtext = d;
    set.r = r;
    Ok(set)
}

impl SelectedSet {
    fn rescore_with(&self, alpha: f64) -> Result<(f64, f64, f64)> {
        let labels = self.labels();
        let embs: Vec<&[f64]> = self.members.iter().map(|m| m.embedding.as_slice()).collect();
        set_scores(&labels, &embs, alpha)
    }
}

pub(crate) fn check_pool(pool: &Pool) -> Result<()> {
    if pool.is_empty() {
        Err(Error::InvalidInput("candidate pool is empty".into()))
    } else {
        Ok(())
    }
}
