//! Per-stage latency model, measurement and the anytime budget controller.
//!
//! The modeled cost of one turn is
//!
//! ```text
//! t_ann    = c_ann * ln N + c_bm25 * |query terms|
//! t_div    = c_sim * L * K + c_delta * K
//! t_prompt = c_sum * |C| + c_fmt * K
//! t_llm    = (|prompt| + T_gen) / r_tok
//! ```
//!
//! Modeled and measured reports are separate types.

use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostConstants {
    pub c_ann: f64,
    pub c_bm25: f64,
    pub c_sim: f64,
    pub c_delta: f64,
    pub c_sum: f64,
    pub c_fmt: f64,
    /// Verifier throughput in tokens per second.
    pub r_tok: f64,
}

impl Default for CostConstants {
    fn default() -> Self {
        Self {
            c_ann: 2e-5,
            c_bm25: 1e-5,
            c_sim: 2e-7,
            c_delta: 1e-6,
            c_sum: 5e-6,
            c_fmt: 2e-6,
            r_tok: 2000.0,
        }
    }
}

impl CostConstants {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("c_ann", self.c_ann),
            ("c_bm25", self.c_bm25),
            ("c_sim", self.c_sim),
            ("c_delta", self.c_delta),
            ("c_sum", self.c_sum),
            ("c_fmt", self.c_fmt),
        ];
        if let Some((n, v)) = named.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidConfig(format!("{n} must be >= 0, got {v}")));
        }
        if !(self.r_tok > 0.0 && self.r_tok.is_finite()) {
            return Err(Error::InvalidConfig(format!("r_tok must be > 0, got {}", self.r_tok)));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("constants serialize")
    }
}

/// Sizes that drive the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    pub memory_size: usize,
    pub query_terms: usize,
    pub pool_size: usize,
    pub k: usize,
    pub turns: usize,
    pub prompt_tokens: usize,
    pub gen_tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimes {
    pub t_ann: f64,
    pub t_div: f64,
    pub t_prompt: f64,
    pub t_llm: f64,
}

impl StageTimes {
    pub fn total(&self) -> f64 {
        self.t_ann + self.t_div + self.t_prompt + self.t_llm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeledLatency {
    pub workload: Workload,
    pub times: StageTimes,
    pub t_total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counters {
    pub similarity_ops: u64,
    pub verifier_calls: u64,
    pub prompt_tokens: u64,
    pub gen_tokens: u64,
    pub turns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasuredLatency {
    pub times: StageTimes,
    pub t_total: f64,
    pub counters: Counters,
}

pub fn model_latency(c: &CostConstants, w: &Workload) -> Result<ModeledLatency> {
    c.validate()?;
    if w.memory_size == 0 {
        return Err(Error::InvalidInput("memory size N must be >= 1".into()));
    }
    let (l, k) = (w.pool_size as f64, w.k as f64);
    let times = StageTimes {
        t_ann: c.c_ann * (w.memory_size as f64).ln() + c.c_bm25 * w.query_terms as f64,
        t_div: c.c_sim * l * k + c.c_delta * k,
        t_prompt: c.c_sum * w.turns as f64 + c.c_fmt * k,
        t_llm: (w.prompt_tokens + w.gen_tokens) as f64 / c.r_tok,
    };
    Ok(ModeledLatency {
        workload: *w,
        times,
        t_total: times.total(),
    })
}

/// Wall-clock accumulator for the four stages.
#[derive(Debug, Default)]
pub struct StageTimer {
    times: StageTimes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimedStage {
    Ann,
    Div,
    Prompt,
    Llm,
}

impl StageTimer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn time<T>(&mut self, stage: TimedStage, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.add(stage, start.elapsed());
        out
    }

    pub fn add(&mut self, stage: TimedStage, d: Duration) {
        let slot = match stage {
            TimedStage::Ann => &mut self.times.t_ann,
            TimedStage::Div => &mut self.times.t_div,
            TimedStage::Prompt => &mut self.times.t_prompt,
            TimedStage::Llm => &mut self.times.t_llm,
        };
        *slot += d.as_secs_f64();
    }

    pub fn finish(self, counters: Counters) -> MeasuredLatency {
        MeasuredLatency {
            times: self.times,
            t_total: self.times.total(),
            counters,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetDecision {
    pub pool_size: usize,
    pub k: usize,
    pub label_cap: usize,
    pub over_budget: bool,
    pub iterations: usize,
    pub t_total: f64,
}

/// Shrinks `(L, K)` until the modeled total fits `budget`: halve L down to
/// K, then lower K by one (with L following it). `U` is never touched.
pub fn budget_control(c: &CostConstants, w: &Workload, label_cap: usize, budget: f64) -> Result<BudgetDecision> {
    if !(budget > 0.0 && budget.is_finite()) {
        return Err(Error::InvalidConfig(format!("budget must be > 0, got {budget}")));
    }
    if w.k == 0 || w.pool_size < w.k {
        return Err(Error::InvalidConfig(format!("need 1 <= K <= L, got K = {}, L = {}", w.k, w.pool_size)));
    }
    let mut cur = *w;
    let mut iterations = 0;
    let mut t = model_latency(c, &cur)?.t_total;
    while t > budget {
        if cur.pool_size > cur.k {
            cur.pool_size = (cur.pool_size / 2).max(cur.k);
        } else if cur.k > 1 {
            cur.k -= 1;
            cur.pool_size = cur.k;
        } else {
            break;
        }
        iterations += 1;
        t = model_latency(c, &cur)?.t_total;
    }
    Ok(BudgetDecision {
        pool_size: cur.pool_size,
        k: cur.k,
        label_cap,
        over_budget: t > budget,
        iterations,
        t_total: t,
    })
}

/// `accuracy - lambda * max(0, t / B - 1)`.
pub fn scalarized_objective(accuracy: f64, t_total: f64, budget: f64, lambda_penalty: f64) -> Result<f64> {
    if !(budget > 0.0) {
        return Err(Error::InvalidConfig(format!("budget must be > 0, got {budget}")));
    }
    if !(lambda_penalty > 0.0) {
        return Err(Error::InvalidConfig(format!("penalty weight must be > 0, got {lambda_penalty}")));
    }
    Ok(accuracy - lambda_penalty * (t_total / budget - 1.0).max(0.0))
}

/// One observed run used to fit the constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub workload: Workload,
    pub times: StageTimes,
}

/// Fits the constants by non-negative least squares, stage by stage.
pub fn calibrate(samples: &[CalibrationSample]) -> Result<CostConstants> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("no calibration samples".into()));
    }
    let col = |f: &dyn Fn(&CalibrationSample) -> f64| samples.iter().map(f).collect::<Vec<_>>();
    let (c_ann, c_bm25) = nnls2(
        &col(&|s| (s.workload.memory_size.max(1) as f64).ln()),
        &col(&|s| s.workload.query_terms as f64),
        &col(&|s| s.times.t_ann),
    );
    let (c_sim, c_delta) = nnls2(
        &col(&|s| (s.workload.pool_size * s.workload.k) as f64),
        &col(&|s| s.workload.k as f64),
        &col(&|s| s.times.t_div),
    );
    let (c_sum, c_fmt) = nnls2(
        &col(&|s| s.workload.turns as f64),
        &col(&|s| s.workload.k as f64),
        &col(&|s| s.times.t_prompt),
    );
    let inv_rate = nnls1(
        &col(&|s| (s.workload.prompt_tokens + s.workload.gen_tokens) as f64),
        &col(&|s| s.times.t_llm),
    );
    if inv_rate <= 0.0 {
        return Err(Error::InvalidInput("verifier timings do not determine r_tok".into()));
    }
    let c = CostConstants {
        c_ann,
        c_bm25,
        c_sim,
        c_delta,
        c_sum,
        c_fmt,
        r_tok: 1.0 / inv_rate,
    };
    c.validate()?;
    Ok(c)
}

fn nnls1(x: &[f64], y: &[f64]) -> f64 {
    let xx: f64 = x.iter().map(|v| v * v).sum();
    if xx == 0.0 {
        return 0.0;
    }
    (x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / xx).max(0.0)
}

fn sse(x1: &[f64], x2: &[f64], y: &[f64], a: f64, b: f64) -> f64 {
    x1.iter().zip(x2).zip(y).map(|((p, q), r)| (r - a * p - b * q).powi(2)).sum()
}

fn nnls2(x1: &[f64], x2: &[f64], y: &[f64]) -> (f64, f64) {
    let s11: f64 = x1.iter().map(|v| v * v).sum();
    let s22: f64 = x2.iter().map(|v| v * v).sum();
    let s12: f64 = x1.iter().zip(x2).map(|(a, b)| a * b).sum();
    let s1y: f64 = x1.iter().zip(y).map(|(a, b)| a * b).sum();
    let s2y: f64 = x2.iter().zip(y).map(|(a, b)| a * b).sum();
    let det = s11 * s22 - s12 * s12;
    if det.abs() > 1e-12 * (s11 * s22).max(1e-300) {
        let a = (s1y * s22 - s2y * s12) / det;
        let b = (s2y * s11 - s1y * s12) / det;
        if a >= 0.0 && b >= 0.0 {
            return (a, b);
        }
    }
    let only1 = (nnls1(x1, y), 0.0);
    let only2 = (0.0, nnls1(x2, y));
    if sse(x1, x2, y, only1.0, only1.1) <= sse(x1, x2, y, only2.0, only2.1) {
        only1
    } else {
        only2
    }
}

/// Nearest-rank percentile, `p` in `[0, 100]`.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&p) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    Some(v[rank - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub runs: usize,
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
}

pub fn summarize(totals: &[f64]) -> Option<LatencySummary> {
    Some(LatencySummary {
        runs: totals.len(),
        mean: totals.iter().sum::<f64>() / totals.len().max(1) as f64,
        p50: percentile(totals, 50.0)?,
        p90: percentile(totals, 90.0)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn zero(r_tok: f64) -> CostConstants {
        CostConstants {
            c_ann: 0.0,
            c_bm25: 0.0,
            c_sim: 0.0,
            c_delta: 0.0,
            c_sum: 0.0,
            c_fmt: 0.0,
            r_tok,
        }
    }

    fn work(n: usize, l: usize, k: usize) -> Workload {
        Workload {
            memory_size: n,
            query_terms: 5,
            pool_size: l,
            k,
            turns: 3,
            prompt_tokens: 300,
            gen_tokens: 100,
        }
    }

    #[test]
    fn verifier_term_only() {
        let m = model_latency(&zero(100.0), &work(1000, 64, 4)).unwrap();
        assert_eq!(m.times.t_llm, 4.0);
        assert_eq!(m.times.t_ann + m.times.t_div + m.times.t_prompt, 0.0);
        assert_eq!(m.t_total, 4.0);
        assert!(model_latency(&zero(0.0), &work(1, 1, 1)).is_err());
        assert!(model_latency(&zero(1.0), &work(0, 1, 1)).is_err());
    }

    #[test]
    fn linear_and_log_terms() {
        let c = CostConstants { c_delta: 0.0, ..Default::default() };
        let a = model_latency(&c, &work(1000, 64, 4)).unwrap();
        let b = model_latency(&c, &work(1000, 128, 4)).unwrap();
        assert!((b.times.t_div - 2.0 * a.times.t_div).abs() < 1e-12);
        let big = model_latency(&c, &work(4000, 64, 4)).unwrap();
        assert!((big.times.t_ann - a.times.t_ann - c.c_ann * 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn controller_cases() {
        let c = CostConstants::default();
        let w = work(1000, 128, 6);
        let t = model_latency(&c, &w).unwrap().t_total;
        let same = budget_control(&c, &w, 1, t * 1.01).unwrap();
        assert_eq!((same.pool_size, same.k, same.iterations), (128, 6, 0));
        assert!(!same.over_budget);

        // Make t_div dominate and halve the budget.
        let heavy = CostConstants { c_sim: 1e-3, r_tok: 1e9, ..zero(1.0) };
        let t = model_latency(&heavy, &w).unwrap().t_total;
        let d = budget_control(&heavy, &w, 2, t / 2.0).unwrap();
        assert!(d.pool_size <= 64 && d.k == 6 && !d.over_budget && d.label_cap == 2);

        let floor = budget_control(&c, &w, 1, 1e-9).unwrap();
        assert!(floor.over_budget);
        assert_eq!((floor.k, floor.pool_size), (1, 1));
        assert!(floor.iterations as f64 <= (128f64).log2() + 6.0);
    }

    #[test]
    fn scalarized_examples() {
        assert_eq!(scalarized_objective(0.8, 1.0, 1.0, 0.5).unwrap(), 0.8);
        assert!((scalarized_objective(0.8, 2.0, 1.0, 0.5).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(scalarized_objective(0.8, 0.1, 1.0, 5.0).unwrap(), 0.8);
        assert!(scalarized_objective(0.8, 0.1, 0.0, 5.0).is_err());
    }

    #[test]
    fn calibration_recovers_constants() {
        let truth = CostConstants::default();
        let samples: Vec<_> = [(1000, 64, 4, 2), (5000, 128, 6, 5), (200, 256, 8, 1), (10_000, 32, 2, 7), (700, 96, 5, 3)]
            .into_iter()
            .enumerate()
            .map(|(i, (n, l, k, turns))| {
                let w = Workload { memory_size: n, query_terms: 3 + i * 2, pool_size: l, k, turns, prompt_tokens: 250 + 17 * i, gen_tokens: 20 };
                CalibrationSample { workload: w, times: model_latency(&truth, &w).unwrap().times }
            })
            .collect();
        let fit = calibrate(&samples).unwrap();
        for (a, b) in [(fit.c_ann, truth.c_ann), (fit.c_sim, truth.c_sim), (fit.c_fmt, truth.c_fmt), (fit.r_tok, truth.r_tok)] {
            assert!((a - b).abs() <= 1e-6 * b.abs(), "{a} vs {b}");
        }
    }

    #[test]
    fn percentiles() {
        let v = [5.0, 1.0, 3.0, 2.0, 4.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        assert_eq!(percentile(&v, 50.0), Some(5.0));
        assert_eq!(percentile(&v, 90.0), Some(9.0));
        assert_eq!(percentile(&[], 50.0), None);
        assert_eq!(summarize(&v).unwrap().mean, 5.5);
    }

    #[test]
    fn constants_toml_round_trip() {
        let c = CostConstants::default();
        assert_eq!(CostConstants::from_toml(&c.to_toml()).unwrap(), c);
        assert!(CostConstants::from_toml("c_ann = 1.0").is_err());
    }

    proptest! {
        #[test]
        fn controller_never_grows(l in 1usize..512, k in 1usize..12, budget in 1e-6f64..1.0) {
            let k = k.min(l);
            let c = CostConstants::default();
            let d = budget_control(&c, &work(5000, l, k), 1, budget).unwrap();
            prop_assert!(d.pool_size <= l && d.k <= k && d.k <= d.pool_size);
            prop_assert!(d.iterations as f64 <= (l as f64).log2() + k as f64);
        }

        #[test]
        fn objective_monotone(acc in 0.0f64..1.0, t1 in 0.0f64..5.0, t2 in 0.0f64..5.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(scalarized_objective(acc, hi, 1.0, 0.7).unwrap() <= scalarized_objective(acc, lo, 1.0, 0.7).unwrap());
        }
    }
}
