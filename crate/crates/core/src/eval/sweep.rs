use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::budget::scalarized_objective;
use crate::error::{Error, Result};
use crate::eval::corpus::EvalInstance;
use crate::eval::metrics::mean_std;
use crate::eval::pipeline::{retrieve, run_arm, Arm, ArmMethod, EvalSummary, ExperimentConfig, Harness, Retrieved, VerifierBackend};
use crate::retrieval::RetrievalConfig;
use crate::select::SelectionConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub ks: Vec<usize>,
    pub alphas: Vec<f64>,
    pub methods: Vec<ArmMethod>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            ks: vec![1, 3, 5, 7, 10],
            alphas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            methods: vec![ArmMethod::Ldra, ArmMethod::Topk, ArmMethod::Mmr, ArmMethod::Fps, ArmMethod::Random],
        }
    }
}

/// One (K, alpha, method, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub k: usize,
    pub alpha: f64,
    pub method: ArmMethod,
    pub seed: u64,
    pub jga: f64,
    pub coverage: f64,
    pub mean_r: f64,
}

/// Seed aggregate of one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub alpha: f64,
    pub method: ArmMethod,
    pub seeds: usize,
    pub jga_mean: f64,
    pub jga_std: f64,
    pub coverage_mean: f64,
    pub coverage_std: f64,
    pub mean_r: f64,
    pub mean_r_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub runs: Vec<SweepRun>,
}

impl SweepTable {
    /// `(mean R, JGA)` per run.
    pub fn r_vs_accuracy(&self) -> Vec<(f64, f64)> {
        self.runs.iter().map(|r| (r.mean_r, r.jga)).collect()
    }
}

fn retrieve_all(corpus: &[EvalInstance], retrieval: &RetrievalConfig, h: &Harness) -> Result<Vec<Retrieved>> {
    corpus.par_iter().map(|inst| retrieve(inst, retrieval, h)).collect()
}

/// Full factorial over K, alpha and method, aggregated over `seeds`.
pub fn sweep(
    corpus: &[EvalInstance],
    base: &ExperimentConfig,
    grid: &SweepGrid,
    seeds: &[u64],
    h: &Harness,
) -> Result<SweepTable> {
    base.validate()?;
    if grid.ks.is_empty() || grid.alphas.is_empty() || grid.methods.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidConfig("sweep grid and seed list must be non-empty".into()));
    }
    if corpus.is_empty() {
        return Err(Error::InvalidInput("sweep needs a non-empty corpus".into()));
    }
    let backend = VerifierBackend::from_spec(&base.verifier)?;
    let pools = retrieve_all(corpus, &base.retrieval, h)?;

    let mut runs = Vec::new();
    let mut rows = Vec::new();
    for &k in &grid.ks {
        for &alpha in &grid.alphas {
            for &method in &grid.methods {
                let cfg = ExperimentConfig {
                    method,
                    selection: SelectionConfig {
                        k,
                        alpha,
                        ..base.selection
                    },
                    ..base.clone()
                };
                cfg.validate()?;
                let mut cell = Vec::with_capacity(seeds.len());
                for &seed in seeds {
                    let out = run_arm(corpus, &cfg, h, &backend, seed, Arm::Plain(method), Some(&pools))?;
                    let s = EvalSummary::from_runs(method.as_str(), seed, &out)?;
                    cell.push(SweepRun {
                        k,
                        alpha,
                        method,
                        seed,
                        jga: s.jga,
                        coverage: s.coverage,
                        mean_r: s.mean_r,
                    });
                }
                let col = |f: fn(&SweepRun) -> f64| mean_std(&cell.iter().map(f).collect::<Vec<_>>());
                let (jga_mean, jga_std) = col(|r| r.jga);
                let (coverage_mean, coverage_std) = col(|r| r.coverage);
                let (mean_r, mean_r_std) = col(|r| r.mean_r);
                rows.push(SweepRow {
                    k,
                    alpha,
                    method,
                    seeds: cell.len(),
                    jga_mean,
                    jga_std,
                    coverage_mean,
                    coverage_std,
                    mean_r,
                    mean_r_std,
                });
                runs.extend(cell);
            }
        }
    }
    Ok(SweepTable { rows, runs })
}

/// Bounded grids over the tunable knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchGrid {
    pub alpha: Vec<f64>,
    pub tau: Vec<f64>,
    pub label_cap: Vec<usize>,
    pub pool_size: Vec<usize>,
    pub k: Vec<usize>,
    pub lambda_vec: Vec<f64>,
    pub mu: Vec<f64>,
}

impl Default for SearchGrid {
    fn default() -> Self {
        Self {
            alpha: vec![0.2, 0.5, 0.8],
            tau: vec![0.2, 0.4, 0.6],
            label_cap: vec![1, 2],
            pool_size: vec![64, 128, 256],
            k: vec![4, 6, 8],
            lambda_vec: vec![0.4, 0.6, 0.8],
            mu: vec![0.0, 0.1, 0.2],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub alpha: f64,
    pub tau: f64,
    pub label_cap: usize,
    pub pool_size: usize,
    pub k: usize,
    pub lambda_vec: f64,
    pub mu: f64,
}

impl SearchGrid {
    pub fn single(p: GridPoint) -> Self {
        Self {
            alpha: vec![p.alpha],
            tau: vec![p.tau],
            label_cap: vec![p.label_cap],
            pool_size: vec![p.pool_size],
            k: vec![p.k],
            lambda_vec: vec![p.lambda_vec],
            mu: vec![p.mu],
        }
    }

    /// Points in a fixed nested order.
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &lambda_vec in &self.lambda_vec {
            for &pool_size in &self.pool_size {
                for &k in &self.k {
                    for &alpha in &self.alpha {
                        for &tau in &self.tau {
                            for &label_cap in &self.label_cap {
                                for &mu in &self.mu {
                                    out.push(GridPoint {
                                        alpha,
                                        tau,
                                        label_cap,
                                        pool_size,
                                        k,
                                        lambda_vec,
                                        mu,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub point: GridPoint,
    pub accuracy: f64,
    /// Mean modeled latency over the dev set.
    pub mean_t: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchReport {
    pub budget: f64,
    pub lambda_penalty: f64,
    pub best: GridResult,
    pub results: Vec<GridResult>,
}

/// Maximizes `accuracy - lambda * max(0, E[t]/B - 1)` over the grid, where
/// `E[t]` is the mean modeled latency. Ties keep the earlier point.
pub fn grid_search(
    corpus: &[EvalInstance],
    base: &ExperimentConfig,
    grid: &SearchGrid,
    budget: f64,
    lambda_penalty: f64,
    h: &Harness,
    seed: u64,
) -> Result<GridSearchReport> {
    let points = grid.points();
    if points.is_empty() {
        return Err(Error::InvalidConfig("search grid is empty".into()));
    }
    if corpus.is_empty() {
        return Err(Error::InvalidInput("grid search needs a non-empty dev set".into()));
    }
    scalarized_objective(0.0, 0.0, budget, lambda_penalty)?;
    let backend = VerifierBackend::from_spec(&base.verifier)?;
    let max_l = *grid.pool_size.iter().max().expect("grid is non-empty");

    // One retrieval per lambda_vec at the largest L; smaller L are prefixes.
    let mut pools: BTreeMap<u64, Vec<Retrieved>> = BTreeMap::new();
    for &lv in &grid.lambda_vec {
        let retrieval = RetrievalConfig {
            lambda_vec: lv,
            pool_size: max_l,
            ..base.retrieval
        };
        pools.insert(lv.to_bits(), retrieve_all(corpus, &retrieval, h)?);
    }

    let results = points
        .par_iter()
        .map(|p| {
            let cfg = ExperimentConfig {
                selection: SelectionConfig {
                    alpha: p.alpha,
                    tau: p.tau,
                    label_cap: p.label_cap,
                    k: p.k,
                    mu: p.mu,
                },
                retrieval: RetrievalConfig {
                    lambda_vec: p.lambda_vec,
                    pool_size: p.pool_size,
                    ..base.retrieval
                },
                ..base.clone()
            };
            cfg.validate()?;
            let runs = run_arm(corpus, &cfg, h, &backend, seed, Arm::Plain(cfg.method), Some(&pools[&p.lambda_vec.to_bits()]))?;
            let s = EvalSummary::from_runs(cfg.method.as_str(), seed, &runs)?;
            Ok(GridResult {
                point: *p,
                accuracy: s.jga,
                mean_t: s.mean_modeled_t_total,
                objective: scalarized_objective(s.jga, s.mean_modeled_t_total, budget, lambda_penalty)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = results
        .iter()
        .copied()
        .reduce(|a, b| if b.objective > a.objective { b } else { a })
        .expect("grid is non-empty");
    Ok(GridSearchReport {
        budget,
        lambda_penalty,
        best,
        results,
    })
}
