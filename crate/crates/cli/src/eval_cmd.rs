use std::io::Write;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use divsel::eval::metrics::mean_std;
use divsel::eval::{
    evaluate, fairness_suite, grid_search, read_instances, sweep, synth_corpus, write_report, EvalInstance,
    ExperimentConfig, Harness, SearchGrid, SweepGrid, SynthSpec,
};
use divsel::Memory;

use crate::io::{read_string, reader, write_line, writer};
use crate::{EvalCmd, EvalData};

struct Loaded {
    cfg: ExperimentConfig,
    harness: Harness,
    instances: Vec<EvalInstance>,
    seeds: Vec<u64>,
}

fn load(d: &EvalData) -> Result<Loaded> {
    let cfg = match &d.config {
        Some(p) => ExperimentConfig::from_toml(&read_string(p)?).with_context(|| format!("config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    let (memory, mut instances) = match (&d.memory, &d.instances) {
        (Some(m), Some(i)) => (Memory::load(m)?, read_instances(reader(i)?)?),
        _ => {
            let corpus = synth_corpus(&SynthSpec::default())?;
            (corpus.memory()?, corpus.instances)
        }
    };
    if let Some(n) = d.limit {
        instances.truncate(n);
    }
    if instances.is_empty() {
        bail!("no eval instances");
    }
    let seeds = match d.seed {
        Some(s) => vec![s],
        None => cfg.runs.seeds.clone(),
    };
    Ok(Loaded {
        cfg,
        harness: Harness::new(memory),
        instances,
        seeds,
    })
}

#[derive(Serialize)]
struct Tagged<T: Serialize> {
    kind: &'static str,
    #[serde(flatten)]
    body: T,
}

#[derive(Serialize)]
struct SeedSummary {
    seed: u64,
    jga: f64,
    aga: f64,
    coverage: f64,
    mean_r: f64,
    mean_prompt_tokens: f64,
    mean_modeled_t_total: f64,
}

#[derive(Serialize)]
struct RunSummary {
    arm: String,
    instances: usize,
    jga_mean: f64,
    jga_std: f64,
    coverage_mean: f64,
    coverage_std: f64,
    per_seed: Vec<SeedSummary>,
}

pub fn run(cmd: EvalCmd) -> Result<()> {
    match cmd {
        EvalCmd::Run { data } => {
            let l = load(&data)?;
            let hash = l.cfg.hash();
            let mut w = writer(data.out.as_deref())?;
            let mut per_seed = Vec::new();
            for &seed in &l.seeds {
                let s = evaluate(&l.instances, &l.cfg, &l.harness, seed)?;
                write_report(&mut w, "run", &hash, seed, &s.rows)?;
                per_seed.push(SeedSummary {
                    seed,
                    jga: s.jga,
                    aga: s.aga,
                    coverage: s.coverage,
                    mean_r: s.mean_r,
                    mean_prompt_tokens: s.mean_prompt_tokens,
                    mean_modeled_t_total: s.mean_modeled_t_total,
                });
            }
            let (jga_mean, jga_std) = mean_std(&per_seed.iter().map(|s| s.jga).collect::<Vec<_>>());
            let (coverage_mean, coverage_std) = mean_std(&per_seed.iter().map(|s| s.coverage).collect::<Vec<_>>());
            let summary = RunSummary {
                arm: l.cfg.method.as_str().to_string(),
                instances: l.instances.len(),
                jga_mean,
                jga_std,
                coverage_mean,
                coverage_std,
                per_seed,
            };
            write_line(&mut *w, &Tagged { kind: "summary", body: summary })?;
            w.flush()?;
        }
        EvalCmd::Fairness { data } => {
            let l = load(&data)?;
            let hash = l.cfg.hash();
            let mut w = writer(data.out.as_deref())?;
            let mut violations = Vec::new();
            for &seed in &l.seeds {
                let rep = fairness_suite(&l.instances, &l.cfg, &l.harness, seed)?;
                write_report(&mut w, "fairness", &hash, seed, &rep.targets)?;
                violations.extend(
                    rep.targets
                        .iter()
                        .filter(|t| !t.within_tolerance)
                        .map(|t| format!("seed {seed} target {}: deviation {:.4}", t.target, t.max_deviation)),
                );
            }
            w.flush()?;
            if !violations.is_empty() {
                bail!("token-equality invariant violated: {}", violations.join("; "));
            }
        }
        EvalCmd::Sweep { data, grid } => {
            let l = load(&data)?;
            let grid: SweepGrid = match grid {
                Some(p) => toml::from_str(&read_string(&p)?).with_context(|| format!("grid {}", p.display()))?,
                None => SweepGrid::default(),
            };
            let table = sweep(&l.instances, &l.cfg, &grid, &l.seeds, &l.harness)?;
            let hash = l.cfg.hash();
            let mut w = writer(data.out.as_deref())?;
            write_report(&mut w, "sweep", &hash, l.seeds[0], &table.rows)?;
            write_report(&mut w, "sweep_runs", &hash, l.seeds[0], &table.runs)?;
            w.flush()?;
        }
        EvalCmd::Grid {
            data,
            grid,
            budget,
            lambda,
        } => {
            let l = load(&data)?;
            let grid: SearchGrid = match grid {
                Some(p) => toml::from_str(&read_string(&p)?).with_context(|| format!("grid {}", p.display()))?,
                None => SearchGrid::default(),
            };
            let seed = l.seeds[0];
            let rep = grid_search(&l.instances, &l.cfg, &grid, budget, lambda, &l.harness, seed)?;
            let mut w = writer(data.out.as_deref())?;
            write_report(&mut w, "grid", &l.cfg.hash(), seed, &rep.results)?;
            write_line(&mut *w, &Tagged { kind: "best", body: rep.best })?;
            w.flush()?;
        }
        EvalCmd::Synth {
            seed,
            out,
            labels,
            per_label,
            ambiguity,
            instances,
            dim,
        } => {
            let spec = SynthSpec {
                labels,
                per_label,
                ambiguity,
                instances,
                dim,
                seed,
                ..SynthSpec::default()
            };
            let corpus = synth_corpus(&spec)?;
            std::fs::create_dir_all(&out)?;
            corpus.write_memory_jsonl(&mut writer(Some(&out.join("memory.jsonl")))?)?;
            corpus.write_instances_jsonl(&mut writer(Some(&out.join("instances.jsonl")))?)?;
            corpus.memory()?.persist(out.join("memory.bin"))?;
            std::fs::write(out.join("spec.json"), serde_json::to_string_pretty(&spec)?)?;
            write_line(
                &mut *writer(None)?,
                &Tagged {
                    kind: "synth",
                    body: serde_json::json!({
                        "exemplars": corpus.exemplars.len(),
                        "instances": corpus.instances.len(),
                        "out": out,
                    }),
                },
            )?;
        }
    }
    Ok(())
}
