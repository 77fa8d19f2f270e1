use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use divsel::budget::{budget_control, calibrate, model_latency, summarize, CalibrationSample, CostConstants, Workload};
use divsel::prompt::{ExemplarLine, PromptTemplate, DEFAULT_ANSWER_FORMAT, DEFAULT_INSTRUCTION};
use divsel::select::BaselineParams;
use divsel::text::count_tokens;
use divsel::verifier::{EndpointConfig, EndpointVerifier};
use divsel::{
    encode_context, retrieve_pool, score_labels, select as run_select, Bm25Params, BudgetConfig, Candidate,
    DialogueContext, EncoderWeights, Memory, Method, MockVerifier, Permutation, Pool, Prompt, PromptComposer,
    RetrievalConfig, SelectedSet, SelectionConfig, Verifier,
};

use crate::io::{read_json, read_jsonl, read_string, reader, write_line, writer};
use crate::{BudgetCmd, ComposeArgs, DecideArgs, RetrieveArgs, SelectArgs, SelectMethod, VerifierKind, WorkloadArgs};

pub fn memory_build(input: &Path, out: &Path, k1: f64, b: f64) -> Result<()> {
    let memory = Memory::ingest_jsonl(reader(input)?, Bm25Params { k1, b })?;
    memory.persist(out)?;
    #[derive(Serialize)]
    struct Built<'a> {
        exemplars: usize,
        labels: usize,
        dim: usize,
        out: &'a Path,
    }
    write_line(
        &mut *writer(None)?,
        &Built {
            exemplars: memory.len(),
            labels: memory.label_index().len(),
            dim: memory.dim(),
            out,
        },
    )
}

fn load_dialogue(query: &str, embedding: Option<&str>) -> Result<DialogueContext> {
    match embedding {
        Some(e) => {
            let v: Vec<f64> = serde_json::from_str(e).context("--embedding must be a JSON array of numbers")?;
            Ok(DialogueContext::single_turn(query, v))
        }
        None => {
            let path = Path::new(query);
            if !path.is_file() {
                bail!("`{query}` is not a dialogue file; pass --embedding for a plain-text query");
            }
            read_json(path)
        }
    }
}

pub fn retrieve(a: &RetrieveArgs) -> Result<()> {
    let memory = Memory::load(&a.memory)?;
    let ctx = load_dialogue(&a.query, a.embedding.as_deref())?;
    let weights = match &a.weights {
        Some(p) => EncoderWeights::load(p)?,
        None => EncoderWeights::current_only(memory.dim()),
    };
    let q = encode_context(&ctx, &weights)?;
    let cfg = RetrievalConfig {
        lambda_vec: a.lambda_vec,
        pool_size: a.pool_size,
        ..Default::default()
    };
    let pool = retrieve_pool(&memory, &q.vector, &ctx.current, &cfg)?;
    let mut w = writer(a.out.as_deref())?;
    for c in &pool.candidates {
        write_line(&mut *w, c)?;
    }
    w.flush()?;
    Ok(())
}

pub fn select(a: &SelectArgs) -> Result<()> {
    let cands: Vec<Candidate> = read_jsonl(&a.pool)?;
    let pool = Pool::from_candidates(cands, RetrievalConfig::default().lambda_vec, Default::default());
    let method = match a.method {
        SelectMethod::Ldra => Method::Ldra,
        SelectMethod::Topk => Method::Topk,
        SelectMethod::Mmr => Method::Mmr,
        SelectMethod::Fps => Method::Fps,
        SelectMethod::Random => Method::Random,
        SelectMethod::Oracle => Method::Oracle,
    };
    let cfg = SelectionConfig {
        alpha: a.alpha,
        k: a.k,
        tau: a.tau,
        label_cap: a.cap,
        mu: a.mu,
    };
    let params = BaselineParams {
        lambda_mmr: a.lambda_mmr,
        seed: a.seed,
    };
    let set = run_select(&pool, method, &cfg, &params)?;
    let constraints = matches!(method, Method::Ldra | Method::Oracle).then_some(&cfg);
    set.check_invariants(constraints)?;
    if method == Method::Ldra && set.similarity_ops > (pool.len() * cfg.k) as u64 {
        bail!("invariant violated: {} similarities exceed L*K = {}", set.similarity_ops, pool.len() * cfg.k);
    }
    let mut w = writer(a.out.as_deref())?;
    write_line(&mut *w, &set)?;
    w.flush()?;
    Ok(())
}

fn parse_permutation(s: &str) -> Result<Permutation> {
    Ok(match s {
        "identity" => Permutation::Identity,
        "reverse" => Permutation::Reverse,
        other => Permutation::Seeded {
            seed: other
                .strip_prefix("seed:")
                .unwrap_or(other)
                .parse()
                .with_context(|| format!("--permute expects identity, reverse or a seed, got `{other}`"))?,
        },
    })
}

pub fn compose(a: &ComposeArgs) -> Result<()> {
    let ctx: DialogueContext = read_json(&a.dialogue)?;
    let set: SelectedSet = read_json(&a.selection)?;
    let composer = match &a.template {
        Some(p) => PromptComposer::new(PromptTemplate::parse(read_string(p)?)?, DEFAULT_INSTRUCTION, DEFAULT_ANSWER_FORMAT),
        None => PromptComposer::default(),
    };
    let defaults = BudgetConfig::default();
    let budget = BudgetConfig {
        max_prompt_tokens: a.budget,
        summary_token_cap: defaults.summary_token_cap.min(a.budget),
        fill_summary: a.fill,
        ..defaults
    };
    let prompt = composer.compose(&ctx, &ExemplarLine::from_selection(&set), &budget, &parse_permutation(&a.permute)?)?;
    let mut w = writer(a.out.as_deref())?;
    write_line(&mut *w, &prompt)?;
    w.flush()?;
    Ok(())
}

fn load_prompt(path: &Path) -> Result<Prompt> {
    let text = read_string(path)?;
    if let Ok(p) = serde_json::from_str::<Prompt>(&text) {
        return Ok(p);
    }
    Ok(Prompt {
        instruction: String::new(),
        summary: String::new(),
        current: String::new(),
        exemplars: Vec::new(),
        answer_format: String::new(),
        token_count: count_tokens(&text),
        rendered: text,
        dropped: Vec::new(),
        compression_trace: Vec::new(),
    })
}

pub fn decide(a: &DecideArgs) -> Result<()> {
    let prompt = load_prompt(&a.prompt)?;
    let labels: Vec<String> = read_string(&a.labels)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    let verifier: Box<dyn Verifier> = match a.verifier {
        VerifierKind::Mock => {
            let gold = a.gold.clone().context("the mock verifier needs --gold")?;
            Box::new(MockVerifier::new(gold, a.seed, a.margin)?)
        }
        VerifierKind::Endpoint => {
            let defaults = EndpointConfig::default();
            Box::new(EndpointVerifier::new(EndpointConfig {
                url: a.url.clone().context("the endpoint verifier needs --url")?,
                token_env: a.token_env.clone().or(defaults.token_env),
                timeout_secs: a.timeout_secs,
            })?)
        }
    };
    let out = score_labels(&prompt, &labels, verifier.as_ref(), a.tau_c)?;
    write_line(&mut *writer(None)?, &out)
}

fn constants(path: Option<&Path>) -> Result<CostConstants> {
    Ok(match path {
        Some(p) => CostConstants::load(p)?,
        None => CostConstants::default(),
    })
}

fn workloads(w: &WorkloadArgs) -> Result<Vec<Workload>> {
    match &w.workloads {
        Some(p) => read_jsonl(p),
        None => Ok(vec![Workload {
            memory_size: w.memory_size,
            query_terms: w.query_terms,
            pool_size: w.pool_size,
            k: w.k,
            turns: w.turns,
            prompt_tokens: w.prompt_tokens,
            gen_tokens: w.gen_tokens,
        }]),
    }
}

#[derive(Serialize)]
struct Summary<T: Serialize> {
    kind: &'static str,
    #[serde(flatten)]
    body: T,
}

pub fn budget(cmd: BudgetCmd) -> Result<()> {
    match cmd {
        BudgetCmd::Model { constants: c, workload, out } => {
            let c = constants(c.as_deref())?;
            let mut w = writer(out.as_deref())?;
            let mut totals = Vec::new();
            for wl in workloads(&workload)? {
                let m = model_latency(&c, &wl)?;
                totals.push(m.t_total);
                write_line(&mut *w, &Summary { kind: "modeled", body: m })?;
            }
            if let Some(s) = summarize(&totals) {
                write_line(&mut *w, &Summary { kind: "summary", body: s })?;
            }
            w.flush()?;
        }
        BudgetCmd::Calibrate { samples, out } => {
            let samples: Vec<CalibrationSample> = read_jsonl(&samples)?;
            let fitted = calibrate(&samples)?;
            let measured: Vec<f64> = samples.iter().map(|s| s.times.total()).collect();
            let mut modeled = Vec::with_capacity(samples.len());
            for s in &samples {
                modeled.push(model_latency(&fitted, &s.workload)?.t_total);
            }
            if let Some(p) = &out {
                std::fs::write(p, fitted.to_toml()).with_context(|| format!("writing {}", p.display()))?;
            }
            let mut w = writer(None)?;
            write_line(&mut *w, &Summary { kind: "constants", body: fitted })?;
            #[derive(Serialize)]
            struct Fit {
                measured: divsel::budget::LatencySummary,
                modeled: divsel::budget::LatencySummary,
            }
            if let (Some(measured), Some(modeled)) = (summarize(&measured), summarize(&modeled)) {
                write_line(&mut *w, &Summary { kind: "summary", body: Fit { measured, modeled } })?;
            }
            w.flush()?;
        }
        BudgetCmd::Control { constants: c, workload, cap, budget } => {
            let c = constants(c.as_deref())?;
            let mut w = writer(None)?;
            for wl in workloads(&workload)? {
                write_line(&mut *w, &Summary { kind: "decision", body: budget_control(&c, &wl, cap, budget)? })?;
            }
            w.flush()?;
        }
    }
    Ok(())
}
