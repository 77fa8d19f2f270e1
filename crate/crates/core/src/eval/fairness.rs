//! Equal-token comparison of selection arms.
//!
//! Every arm composes its prompt with the summary filling whatever the
//! exemplars leave, so all arms land on the same token target.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Stage};
use crate::eval::corpus::EvalInstance;
use crate::eval::pipeline::{retrieve, run_arm, Arm, ArmMethod, ExperimentConfig, Harness, PipelineRun, VerifierBackend};
use crate::prompt::BudgetConfig;

/// Largest allowed relative spread of prompt tokens across arms.
pub const TOKEN_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    pub accuracy: f64,
    pub coverage: f64,
    pub mean_tokens: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetReport {
    pub target: usize,
    /// Why the target was not run, when it was not.
    pub skipped: Option<String>,
    pub arms: Vec<ArmResult>,
    /// Largest `(max - min) / min` prompt length across arms on one instance.
    pub max_deviation: f64,
    pub within_tolerance: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub seed: u64,
    pub targets: Vec<TargetReport>,
}

impl FairnessReport {
    pub fn all_within_tolerance(&self) -> bool {
        self.targets.iter().all(|t| t.within_tolerance)
    }

    pub fn arm(&self, target: usize, arm: &str) -> Option<&ArmResult> {
        self.targets
            .iter()
            .find(|t| t.target == target)?
            .arms
            .iter()
            .find(|a| a.arm == arm)
    }
}

fn is_composition_failure(e: &Error) -> bool {
    match e {
        Error::Composition(_) => true,
        Error::Stage { stage: Stage::Compose, source } => is_composition_failure(source),
        _ => false,
    }
}

pub(crate) fn arms(cfg: &ExperimentConfig) -> Vec<Arm> {
    let mut arms = vec![
        Arm::Plain(ArmMethod::Ldra),
        Arm::Plain(ArmMethod::Topk),
        Arm::Plain(ArmMethod::TopkRandAdd),
        Arm::LdraShuffle {
            seed: cfg.fairness.shuffle_seed,
        },
    ];
    if cfg.fairness.prefix_replace {
        arms.push(Arm::LdraPrefixReplace);
    }
    arms
}

/// Runs every arm at every token target of `base.fairness`.
pub fn fairness_suite(corpus: &[EvalInstance], base: &ExperimentConfig, h: &Harness, seed: u64) -> Result<FairnessReport> {
    base.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidInput("fairness suite needs a non-empty corpus".into()));
    }
    let backend = VerifierBackend::from_spec(&base.verifier)?;
    let pools = corpus
        .iter()
        .map(|inst| retrieve(inst, &base.retrieval, h))
        .collect::<Result<Vec<_>>>()?;

    let mut targets = Vec::new();
    'target: for &target in &base.fairness.token_targets {
        let cfg = ExperimentConfig {
            budget: BudgetConfig {
                max_prompt_tokens: target,
                fill_summary: true,
                ..base.budget
            },
            ..base.clone()
        };
        let mut per_arm: Vec<(Arm, Vec<PipelineRun>)> = Vec::new();
        for arm in arms(&cfg) {
            match run_arm(corpus, &cfg, h, &backend, seed, arm, Some(&pools)) {
                Ok(runs) => per_arm.push((arm, runs)),
                Err(e) if is_composition_failure(&e) => {
                    targets.push(TargetReport {
                        target,
                        skipped: Some(e.to_string()),
                        arms: Vec::new(),
                        max_deviation: 0.0,
                        within_tolerance: true,
                    });
                    continue 'target;
                }
                Err(e) => return Err(e),
            }
        }

        let mut max_deviation: f64 = 0.0;
        for i in 0..corpus.len() {
            let counts = per_arm.iter().map(|(_, runs)| runs[i].prompt.token_count);
            let lo = counts.clone().min().unwrap_or(0);
            let hi = counts.max().unwrap_or(0);
            if lo > 0 {
                max_deviation = max_deviation.max((hi - lo) as f64 / lo as f64);
            }
        }
        let n = corpus.len() as f64;
        let arms = per_arm
            .iter()
            .map(|(arm, runs)| ArmResult {
                arm: arm.name().to_string(),
                accuracy: runs.iter().filter(|r| r.correct).count() as f64 / n,
                coverage: runs.iter().filter(|r| r.covered).count() as f64 / n,
                mean_tokens: runs.iter().map(|r| r.prompt.token_count as f64).sum::<f64>() / n,
                min_tokens: runs.iter().map(|r| r.prompt.token_count).min().unwrap_or(0),
                max_tokens: runs.iter().map(|r| r.prompt.token_count).max().unwrap_or(0),
            })
            .collect();
        targets.push(TargetReport {
            target,
            skipped: None,
            arms,
            max_deviation,
            within_tolerance: max_deviation <= TOKEN_TOLERANCE,
        });
    }
    Ok(FairnessReport { seed, targets })
}
