use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::budget::{model_latency, Counters, CostConstants, MeasuredLatency, ModeledLatency, StageTimer, TimedStage, Workload};
use crate::encoder::{encode_context, EncoderWeights};
use crate::error::{Error, Result, Stage};
use crate::eval::corpus::EvalInstance;
use crate::eval::metrics::{aga, jga, mean_std, parse_state};
use crate::memory::{FlatIndex, Memory};
use crate::prompt::{BudgetConfig, ExemplarLine, Permutation, Prompt, PromptComposer};
use crate::retrieval::{retrieve_pool_with, Pool, RetrievalConfig};
use crate::select::{greedy_select, select, BaselineParams, Method, SelectedSet, SelectionConfig};
use crate::text::terms;
use crate::verifier::{
    candidate_labels, score_labels, EndpointConfig, EndpointVerifier, MockVerifier, Verifier, VerifierOutput,
    DEFAULT_SHORTLIST, DEFAULT_TAU_C, TAU_C_RANGE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmMethod {
    Ldra,
    Topk,
    Mmr,
    Fps,
    Random,
    /// Top-K followed by random memory exemplars until the budget is full.
    TopkRandAdd,
}

impl ArmMethod {
    pub const ALL: [ArmMethod; 6] = [
        ArmMethod::Ldra,
        ArmMethod::Topk,
        ArmMethod::Mmr,
        ArmMethod::Fps,
        ArmMethod::Random,
        ArmMethod::TopkRandAdd,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ArmMethod::Ldra => "ldra",
            ArmMethod::Topk => "topk",
            ArmMethod::Mmr => "mmr",
            ArmMethod::Fps => "fps",
            ArmMethod::Random => "random",
            ArmMethod::TopkRandAdd => "topk_rand_add",
        }
    }
}

impl std::str::FromStr for ArmMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArmMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FairnessConfig {
    /// Seed of the shuffle arm; the run seed when absent.
    pub shuffle_seed: Option<u64>,
    pub prefix_replace: bool,
    pub token_targets: Vec<usize>,
}

pub const FAIRNESS_TARGETS: [usize; 5] = [260, 285, 310, 330, 360];

impl Default for FairnessConfig {
    fn default() -> Self {
        Self {
            shuffle_seed: None,
            prefix_replace: true,
            token_targets: FAIRNESS_TARGETS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunsConfig {
    pub seeds: Vec<u64>,
}

impl Default for RunsConfig {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum VerifierSpec {
    Mock { margin: f64, seed: u64 },
    Endpoint(EndpointConfig),
}

impl Default for VerifierSpec {
    fn default() -> Self {
        VerifierSpec::Mock { margin: 2.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub method: ArmMethod,
    pub selection: SelectionConfig,
    pub retrieval: RetrievalConfig,
    pub budget: BudgetConfig,
    pub baseline: BaselineParams,
    pub fairness: FairnessConfig,
    pub runs: RunsConfig,
    pub shortlist_size: usize,
    pub tau_c: f64,
    pub verifier: VerifierSpec,
    pub costs: CostConstants,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: ArmMethod::Ldra,
            selection: SelectionConfig::default(),
            retrieval: RetrievalConfig::default(),
            budget: BudgetConfig::default(),
            baseline: BaselineParams::default(),
            fairness: FairnessConfig::default(),
            runs: RunsConfig::default(),
            shortlist_size: DEFAULT_SHORTLIST,
            tau_c: DEFAULT_TAU_C,
            verifier: VerifierSpec::default(),
            costs: CostConstants::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.selection.validate()?;
        self.retrieval.validate()?;
        self.budget.validate()?;
        self.costs.validate()?;
        let t = &self.fairness.token_targets;
        if t.contains(&0) || t.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("token targets must be positive and strictly increasing".into()));
        }
        if self.runs.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one run seed is required".into()));
        }
        if !(TAU_C_RANGE.0..=TAU_C_RANGE.1).contains(&self.tau_c) {
            return Err(Error::InvalidConfig(format!(
                "tau_c must be in [{}, {}], got {}",
                TAU_C_RANGE.0, TAU_C_RANGE.1, self.tau_c
            )));
        }
        if self.selection.k > self.retrieval.pool_size {
            return Err(Error::InvalidConfig(format!(
                "K = {} exceeds pool size L = {}",
                self.selection.k, self.retrieval.pool_size
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Per-instance seed from the run seed and the instance id.
pub fn derive_seed(seed: u64, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

/// Immutable state shared by every pipeline run.
#[derive(Debug)]
pub struct Harness {
    pub memory: Memory,
    pub index: FlatIndex,
    pub weights: EncoderWeights,
    pub composer: PromptComposer,
}

impl Harness {
    pub fn new(memory: Memory) -> Self {
        let weights = EncoderWeights::current_only(memory.dim());
        Self::with_weights(memory, weights)
    }

    pub fn with_weights(memory: Memory, weights: EncoderWeights) -> Self {
        Self {
            index: FlatIndex::build(&memory),
            memory,
            weights,
            composer: PromptComposer::default(),
        }
    }
}

/// Verifier backend, instantiated per instance for the mock.
#[derive(Debug)]
pub enum VerifierBackend {
    Mock { margin: f64, seed: u64 },
    Endpoint(EndpointVerifier),
}

impl VerifierBackend {
    pub fn from_spec(spec: &VerifierSpec) -> Result<Self> {
        match spec {
            VerifierSpec::Mock { margin, seed } => {
                MockVerifier::new("", *seed, *margin)?;
                Ok(VerifierBackend::Mock {
                    margin: *margin,
                    seed: *seed,
                })
            }
            VerifierSpec::Endpoint(cfg) => Ok(VerifierBackend::Endpoint(EndpointVerifier::new(cfg.clone())?)),
        }
    }

    pub fn with<T>(&self, inst: &EvalInstance, f: impl FnOnce(&dyn Verifier) -> T) -> T {
        match self {
            VerifierBackend::Mock { margin, seed } => {
                let m = MockVerifier {
                    gold: inst.gold.clone(),
                    seed: derive_seed(*seed, &inst.id),
                    margin: *margin,
                };
                f(&m)
            }
            VerifierBackend::Endpoint(e) => f(e),
        }
    }
}

/// Every intermediate artifact of one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRun {
    pub instance_id: String,
    pub arm: String,
    pub gold: String,
    pub prediction: String,
    pub correct: bool,
    /// Gold label among the labels shown to the verifier.
    pub covered: bool,
    pub query: Vec<f64>,
    pub pool: Pool,
    pub selection: SelectedSet,
    pub prompt: Prompt,
    pub verifier: VerifierOutput,
    pub modeled: ModeledLatency,
    #[serde(skip)]
    pub measured: Option<MeasuredLatency>,
}

/// Selection variants used by the experiment arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Arm {
    Plain(ArmMethod),
    LdraShuffle { seed: Option<u64> },
    LdraPrefixReplace,
}

impl Arm {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Arm::Plain(m) => m.as_str(),
            Arm::LdraShuffle { .. } => "ldra_shuffle",
            Arm::LdraPrefixReplace => "ldra_prefix_replace",
        }
    }
}

pub(crate) struct Retrieved {
    pub query: Vec<f64>,
    pub pool: Pool,
    pub seconds: f64,
}

pub(crate) fn retrieve(inst: &EvalInstance, retrieval: &RetrievalConfig, h: &Harness) -> Result<Retrieved> {
    let start = Instant::now();
    let q = encode_context(&inst.dialogue, &h.weights).map_err(Error::at(Stage::Encode))?;
    let pool = retrieve_pool_with(&h.index, &h.memory, &q.vector, &inst.dialogue.current, retrieval)
        .map_err(Error::at(Stage::Retrieve))?;
    Ok(Retrieved {
        query: q.vector,
        pool,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Encodes, retrieves, selects, composes, and decides for one instance.
pub fn run_pipeline(
    inst: &EvalInstance,
    cfg: &ExperimentConfig,
    h: &Harness,
    verifier: &dyn Verifier,
    seed: u64,
) -> Result<PipelineRun> {
    let r = retrieve(inst, &cfg.retrieval, h)?;
    run_from_pool(inst, r, cfg, h, verifier, seed, Arm::Plain(cfg.method))
}

pub(crate) fn run_from_pool(
    inst: &EvalInstance,
    retrieved: Retrieved,
    cfg: &ExperimentConfig,
    h: &Harness,
    verifier: &dyn Verifier,
    seed: u64,
    arm: Arm,
) -> Result<PipelineRun> {
    let Retrieved { query, pool, seconds } = retrieved;
    let inst_seed = derive_seed(seed, &inst.id);
    let mut rng = ChaCha8Rng::seed_from_u64(inst_seed);
    let mut timer = StageTimer::new();
    timer.add(TimedStage::Ann, std::time::Duration::from_secs_f64(seconds));

    let selection = timer
        .time(TimedStage::Div, || select_for_arm(&pool, cfg, arm, inst_seed))
        .map_err(Error::at(Stage::Select))?;
    if arm == Arm::Plain(ArmMethod::Ldra) {
        selection.check_invariants(Some(&cfg.selection)).map_err(Error::at(Stage::Select))?;
        let bound = (pool.len() * cfg.selection.k) as u64;
        if selection.similarity_ops > bound {
            return Err(Error::at(Stage::Select)(Error::InvalidInput(format!(
                "greedy computed {} similarities, bound L*K is {bound}",
                selection.similarity_ops
            ))));
        }
    } else {
        selection.check_invariants(None).map_err(Error::at(Stage::Select))?;
    }

    let (prompt, labels) = timer.time(TimedStage::Prompt, || -> Result<_> {
        let mut lines = ExemplarLine::from_selection(&selection);
        let mut permutation = Permutation::Identity;
        match arm {
            Arm::Plain(ArmMethod::TopkRandAdd) => {
                rand_add(&mut lines, &inst.dialogue, &cfg.budget, h, &mut rng).map_err(Error::at(Stage::Compose))?
            }
            Arm::LdraShuffle { seed: s } => permutation = Permutation::Seeded { seed: s.unwrap_or(inst_seed) },
            Arm::LdraPrefixReplace => prefix_replace(&mut lines, cfg.selection.k, &h.memory, &mut rng),
            Arm::Plain(_) => {}
        }
        let prompt = h
            .composer
            .compose(&inst.dialogue, &lines, &cfg.budget, &permutation)
            .map_err(Error::at(Stage::Compose))?;
        let labels = candidate_labels(&prompt.exemplar_labels(), &pool, cfg.shortlist_size)
            .map_err(Error::at(Stage::Candidates))?;
        Ok((prompt, labels))
    })?;

    let out = timer
        .time(TimedStage::Llm, || score_labels(&prompt, &labels, verifier, cfg.tau_c))
        .map_err(Error::at(Stage::Verify))?;

    let counters = Counters {
        similarity_ops: selection.similarity_ops,
        verifier_calls: out.verifier_calls,
        prompt_tokens: prompt.token_count as u64,
        gen_tokens: out.verifier_calls,
        turns: inst.dialogue.turns.len() as u64,
    };
    let workload = Workload {
        memory_size: h.memory.len(),
        query_terms: terms(&inst.dialogue.current).len(),
        pool_size: pool.len(),
        k: cfg.selection.k,
        turns: inst.dialogue.turns.len(),
        prompt_tokens: prompt.token_count,
        gen_tokens: out.verifier_calls as usize,
    };
    let modeled = model_latency(&cfg.costs, &workload)?;
    let covered = labels.iter().any(|l| *l == inst.gold);
    Ok(PipelineRun {
        instance_id: inst.id.clone(),
        arm: arm.name().to_string(),
        gold: inst.gold.clone(),
        correct: out.decision == inst.gold,
        prediction: out.decision.clone(),
        covered,
        query,
        pool,
        selection,
        prompt,
        verifier: out,
        modeled,
        measured: Some(timer.finish(counters)),
    })
}

fn select_for_arm(pool: &Pool, cfg: &ExperimentConfig, arm: Arm, seed: u64) -> Result<SelectedSet> {
    let params = BaselineParams {
        seed,
        ..cfg.baseline
    };
    let method = match arm {
        Arm::Plain(ArmMethod::Ldra) | Arm::LdraShuffle { .. } | Arm::LdraPrefixReplace => {
            return greedy_select(pool, &cfg.selection)
        }
        Arm::Plain(ArmMethod::Topk) | Arm::Plain(ArmMethod::TopkRandAdd) => Method::Topk,
        Arm::Plain(ArmMethod::Mmr) => Method::Mmr,
        Arm::Plain(ArmMethod::Fps) => Method::Fps,
        Arm::Plain(ArmMethod::Random) => Method::Random,
    };
    select(pool, method, &cfg.selection, &params)
}

/// Appends random memory exemplars while the prompt still composes without
/// any compression step. In fill mode that means the exemplars take the
/// budget and the summary gets the remainder.
fn rand_add(
    lines: &mut Vec<ExemplarLine>,
    ctx: &crate::encoder::DialogueContext,
    budget: &BudgetConfig,
    h: &Harness,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let taken: std::collections::HashSet<String> = lines.iter().map(|l| l.id.clone()).collect();
    let mut order: Vec<usize> = (0..h.memory.len()).filter(|&i| !taken.contains(&h.memory.get(i).id)).collect();
    // Partial Fisher-Yates: draw until one does not fit.
    for i in 0..order.len() {
        let j = rng.random_range(i..order.len());
        order.swap(i, j);
        let ex = h.memory.get(order[i]);
        lines.push(ExemplarLine {
            id: ex.id.clone(),
            text: ex.text.clone(),
            label: ex.label.clone(),
        });
        let fits = h
            .composer
            .compose(ctx, lines, budget, &Permutation::Identity)
            .map(|p| p.dropped.is_empty())
            .unwrap_or(false);
        if !fits {
            lines.pop();
            break;
        }
    }
    Ok(())
}

/// Replaces the first `ceil(K/2)` lines with random memory exemplars of the
/// same label, keeping a line when its label has no unused exemplar.
fn prefix_replace(lines: &mut [ExemplarLine], k: usize, memory: &Memory, rng: &mut ChaCha8Rng) {
    let n = k.div_ceil(2).min(lines.len());
    let mut used: std::collections::HashSet<String> = lines.iter().map(|l| l.id.clone()).collect();
    for line in lines.iter_mut().take(n) {
        let pool: Vec<usize> = memory.label_index()[&line.label]
            .iter()
            .copied()
            .filter(|&i| !used.contains(&memory.get(i).id))
            .collect();
        if let Some(&i) = pool.choose(rng) {
            let ex = memory.get(i);
            used.insert(ex.id.clone());
            *line = ExemplarLine {
                id: ex.id.clone(),
                text: ex.text.clone(),
                label: ex.label.clone(),
            };
        }
    }
}

/// One result row per instance; everything in it is deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRow {
    pub id: String,
    pub arm: String,
    pub gold: String,
    pub prediction: String,
    pub correct: bool,
    pub covered: bool,
    pub selected: usize,
    pub r: f64,
    pub prompt_tokens: usize,
    pub verifier_calls: u64,
    pub similarity_ops: u64,
    pub modeled_t_total: f64,
}

impl From<&PipelineRun> for InstanceRow {
    fn from(r: &PipelineRun) -> Self {
        Self {
            id: r.instance_id.clone(),
            arm: r.arm.clone(),
            gold: r.gold.clone(),
            prediction: r.prediction.clone(),
            correct: r.correct,
            covered: r.covered,
            selected: r.selection.len(),
            r: r.selection.r,
            prompt_tokens: r.prompt.token_count,
            verifier_calls: r.verifier.verifier_calls,
            similarity_ops: r.selection.similarity_ops,
            modeled_t_total: r.modeled.t_total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub arm: String,
    pub seed: u64,
    pub instances: usize,
    pub jga: f64,
    pub aga: f64,
    pub coverage: f64,
    pub mean_r: f64,
    pub mean_prompt_tokens: f64,
    pub mean_modeled_t_total: f64,
    pub rows: Vec<InstanceRow>,
    /// Wall-clock totals per instance; excluded from reports.
    #[serde(skip)]
    pub measured_totals: Vec<f64>,
}

impl EvalSummary {
    pub(crate) fn from_runs(arm: &str, seed: u64, runs: &[PipelineRun]) -> Result<Self> {
        let preds: Vec<&str> = runs.iter().map(|r| r.prediction.as_str()).collect();
        let golds: Vec<&str> = runs.iter().map(|r| r.gold.as_str()).collect();
        let n = runs.len().max(1) as f64;
        let pred_slots: Vec<_> = preds.iter().map(|p| parse_state(p)).collect();
        let gold_slots: Vec<_> = golds.iter().map(|g| parse_state(g)).collect();
        Ok(Self {
            arm: arm.to_string(),
            seed,
            instances: runs.len(),
            jga: jga(&preds, &golds)?,
            aga: aga(&pred_slots, &gold_slots).unwrap_or(f64::NAN),
            coverage: runs.iter().filter(|r| r.covered).count() as f64 / n,
            mean_r: mean_std(&runs.iter().map(|r| r.selection.r).collect::<Vec<_>>()).0,
            mean_prompt_tokens: runs.iter().map(|r| r.prompt.token_count as f64).sum::<f64>() / n,
            mean_modeled_t_total: runs.iter().map(|r| r.modeled.t_total).sum::<f64>() / n,
            rows: runs.iter().map(InstanceRow::from).collect(),
            measured_totals: runs.iter().filter_map(|r| r.measured.map(|m| m.t_total)).collect(),
        })
    }
}

/// Runs one arm over a corpus. Instances run in parallel; results keep
/// corpus order.
pub(crate) fn run_arm(
    corpus: &[EvalInstance],
    cfg: &ExperimentConfig,
    h: &Harness,
    backend: &VerifierBackend,
    seed: u64,
    arm: Arm,
    pools: Option<&[Retrieved]>,
) -> Result<Vec<PipelineRun>> {
    corpus
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let r = match pools {
                Some(p) => Retrieved {
                    query: p[i].query.clone(),
                    pool: p[i].pool.truncated(cfg.retrieval.pool_size),
                    seconds: p[i].seconds,
                },
                None => retrieve(inst, &cfg.retrieval, h)?,
            };
            backend.with(inst, |v| run_from_pool(inst, r, cfg, h, v, seed, arm))
        })
        .collect()
}

/// Evaluates `cfg.method` on the corpus under one seed.
pub fn evaluate(corpus: &[EvalInstance], cfg: &ExperimentConfig, h: &Harness, seed: u64) -> Result<EvalSummary> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidInput("eval corpus is empty".into()));
    }
    let backend = VerifierBackend::from_spec(&cfg.verifier)?;
    let runs = run_arm(corpus, cfg, h, &backend, seed, Arm::Plain(cfg.method), None)?;
    EvalSummary::from_runs(cfg.method.as_str(), seed, &runs)
}
