//! Structured prompt assembly with exact token accounting.
//!
//! Sections are rendered in a fixed order (instruction, history summary,
//! current utterance, exemplars, answer format) through a plain-text
//! template. When the rendered prompt exceeds the budget the composer
//! compresses it step by step, and each step strictly lowers the count.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{DialogueContext, Turn};
use crate::error::{Error, Result};
use crate::select::SelectedSet;
use crate::text::{tail_tokens, RuleTokenizer, TokenCounter};

pub const PLACEHOLDERS: [&str; 5] = [
    "{INSTRUCTION}",
    "{SUMMARY}",
    "{CURRENT}",
    "{EXEMPLARS}",
    "{ANSWER_FORMAT}",
];

pub const DEFAULT_TEMPLATE: &str = "{INSTRUCTION}\n\
Context summary:\n{SUMMARY}\n\
Current utterance: {CURRENT}\n\
Exemplars:\n{EXEMPLARS}\n\
{ANSWER_FORMAT}\n";

pub const DEFAULT_INSTRUCTION: &str = "You are a customer-service agent. Given the dialogue \
history and the current user utterance, predict the user's intent.";

pub const DEFAULT_ANSWER_FORMAT: &str = "Answer with exactly one intent label.";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    text: String,
}

impl PromptTemplate {
    /// Accepts a template that contains every placeholder exactly once, in
    /// section order.
    pub fn parse(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        let mut last = 0;
        for p in PLACEHOLDERS {
            let Some(at) = text.find(p) else {
                return Err(Error::InvalidInput(format!("template is missing {p}")));
            };
            if text.matches(p).count() != 1 {
                return Err(Error::InvalidInput(format!("template repeats {p}")));
            }
            if at < last {
                return Err(Error::InvalidInput(format!("template has {p} out of order")));
            }
            last = at;
        }
        Ok(Self { text })
    }

    pub fn render(&self, s: &Sections<'_>) -> String {
        self.text
            .replace("{INSTRUCTION}", s.instruction)
            .replace("{SUMMARY}", s.summary)
            .replace("{CURRENT}", s.current)
            .replace("{EXEMPLARS}", s.exemplars)
            .replace("{ANSWER_FORMAT}", s.answer_format)
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATE).expect("default template is well formed")
    }
}

pub struct Sections<'a> {
    pub instruction: &'a str,
    pub summary: &'a str,
    pub current: &'a str,
    pub exemplars: &'a str,
    pub answer_format: &'a str,
}

/// One exemplar as it appears in the prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExemplarLine {
    pub id: String,
    pub text: String,
    pub label: String,
}

impl ExemplarLine {
    pub fn render(&self) -> String {
        format!("User: {} => Intent: {}", self.text, self.label)
    }

    pub fn from_selection(set: &SelectedSet) -> Vec<ExemplarLine> {
        set.members
            .iter()
            .map(|m| ExemplarLine {
                id: m.id.clone(),
                text: m.text.clone(),
                label: m.label.clone(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressionPolicy {
    /// Shrink the history summary first, then drop trailing exemplars.
    #[default]
    SummaryThenExemplars,
    /// Drop trailing exemplars first, then shrink the summary.
    ExemplarsThenSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BudgetConfig {
    pub max_prompt_tokens: usize,
    pub summary_token_cap: usize,
    pub compression_policy: CompressionPolicy,
    /// Let the summary absorb whatever budget the other sections leave,
    /// truncating the oldest included turn at token granularity. Used to
    /// equalize prompt lengths across methods.
    pub fill_summary: bool,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            max_prompt_tokens: 1024,
            summary_token_cap: 128,
            compression_policy: CompressionPolicy::SummaryThenExemplars,
            fill_summary: false,
        }
    }
}

impl BudgetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_prompt_tokens == 0 {
            return Err(Error::InvalidConfig("prompt token cap must be positive".into()));
        }
        if self.summary_token_cap == 0 && !self.fill_summary {
            return Err(Error::InvalidConfig("summary token cap must be positive".into()));
        }
        if !self.fill_summary && self.summary_token_cap > self.max_prompt_tokens {
            return Err(Error::InvalidConfig("summary cap exceeds the prompt cap".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Permutation {
    Identity,
    Reverse,
    Seeded { seed: u64 },
    Explicit { order: Vec<usize> },
}

impl Permutation {
    pub fn apply<T: Clone>(&self, items: &[T]) -> Result<Vec<T>> {
        let n = items.len();
        let order: Vec<usize> = match self {
            Permutation::Identity => (0..n).collect(),
            Permutation::Reverse => (0..n).rev().collect(),
            Permutation::Seeded { seed } => {
                let mut o: Vec<usize> = (0..n).collect();
                o.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed));
                o
            }
            Permutation::Explicit { order } => {
                let mut seen = vec![false; n];
                for &i in order {
                    if i >= n || std::mem::replace(&mut seen[i], true) {
                        return Err(Error::InvalidInput(format!("{order:?} is not a permutation of 0..{n}")));
                    }
                }
                if order.len() != n {
                    return Err(Error::InvalidInput(format!("{order:?} is not a permutation of 0..{n}")));
                }
                order.clone()
            }
        };
        Ok(order.into_iter().map(|i| items[i].clone()).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Dropped {
    /// The summary was re-cut to a smaller token cap.
    Summary { from_tokens: usize, to_tokens: usize },
    Exemplar { id: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub instruction: String,
    pub summary: String,
    pub current: String,
    pub exemplars: Vec<ExemplarLine>,
    pub answer_format: String,
    pub rendered: String,
    pub token_count: usize,
    pub dropped: Vec<Dropped>,
    /// Token count after each compression step, starting from the
    /// uncompressed rendering.
    pub compression_trace: Vec<usize>,
}

impl Prompt {
    pub fn exemplar_labels(&self) -> Vec<&str> {
        self.exemplars.iter().map(|e| e.label.as_str()).collect()
    }
}

fn render_turn(t: &Turn) -> String {
    format!("User: {}\nAgent: {}", t.user, t.agent)
}

/// Extractive recency-first summary: whole turns from the most recent
/// backwards while they fit in `cap` tokens, rendered in chronological order.
pub fn summarize_history(ctx: &DialogueContext, cap: usize, counter: &dyn TokenCounter) -> String {
    summarize(ctx, cap, counter, false)
}

fn summarize(ctx: &DialogueContext, cap: usize, counter: &dyn TokenCounter, fill: bool) -> String {
    let mut used = 0;
    let mut parts: Vec<String> = Vec::new();
    for turn in ctx.turns.iter().rev() {
        let rendered = render_turn(turn);
        let n = counter.count(&rendered);
        if used + n <= cap {
            used += n;
            parts.push(rendered);
            continue;
        }
        if fill && used < cap {
            parts.push(tail_tokens(&rendered, cap - used));
        }
        break;
    }
    parts.reverse();
    parts.join("\n")
}

/// Renders prompts against one template, instruction and token counter.
#[derive(Clone)]
pub struct PromptComposer {
    pub template: PromptTemplate,
    pub instruction: String,
    pub answer_format: String,
    counter: Arc<dyn TokenCounter>,
}

impl Default for PromptComposer {
    fn default() -> Self {
        Self::new(PromptTemplate::default(), DEFAULT_INSTRUCTION, DEFAULT_ANSWER_FORMAT)
    }
}

impl std::fmt::Debug for PromptComposer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PromptComposer")
            .field("template", &self.template)
            .field("instruction", &self.instruction)
            .field("answer_format", &self.answer_format)
            .finish_non_exhaustive()
    }
}

impl PromptComposer {
    pub fn new(template: PromptTemplate, instruction: impl Into<String>, answer_format: impl Into<String>) -> Self {
        Self {
            template,
            instruction: instruction.into(),
            answer_format: answer_format.into(),
            counter: Arc::new(RuleTokenizer),
        }
    }

    pub fn with_counter(mut self, counter: Arc<dyn TokenCounter>) -> Self {
        self.counter = counter;
        self
    }

    pub fn counter(&self) -> &dyn TokenCounter {
        self.counter.as_ref()
    }

    pub fn count_tokens(&self, text: &str) -> usize {
        self.counter.count(text)
    }

    fn render(&self, summary: &str, current: &str, lines: &[ExemplarLine]) -> String {
        let block = lines.iter().map(ExemplarLine::render).collect::<Vec<_>>().join("\n");
        self.template.render(&Sections {
            instruction: &self.instruction,
            summary,
            current,
            exemplars: &block,
            answer_format: &self.answer_format,
        })
    }

    pub fn compose(
        &self,
        ctx: &DialogueContext,
        exemplars: &[ExemplarLine],
        budget: &BudgetConfig,
        permutation: &Permutation,
    ) -> Result<Prompt> {
        budget.validate()?;
        let max = budget.max_prompt_tokens;
        let mut lines = permutation.apply(exemplars)?;
        let mut dropped = Vec::new();
        let mut trace = Vec::new();

        let summary = if budget.fill_summary {
            // Exemplars give way first; the summary takes what is left.
            let mut base = self.counter.count(&self.render("", &ctx.current, &lines));
            trace.push(base);
            while base > max {
                let Some(last) = lines.pop() else {
                    return Err(self.too_large(base, max));
                };
                dropped.push(Dropped::Exemplar { id: last.id });
                base = self.counter.count(&self.render("", &ctx.current, &lines));
                trace.push(base);
            }
            summarize(ctx, max - base, self.counter.as_ref(), true)
        } else {
            let mut summary = summarize(ctx, budget.summary_token_cap, self.counter.as_ref(), false);
            let mut count = self.counter.count(&self.render(&summary, &ctx.current, &lines));
            trace.push(count);
            while count > max {
                let shrink_summary = !summary.is_empty()
                    && (budget.compression_policy == CompressionPolicy::SummaryThenExemplars
                        || lines.is_empty());
                if shrink_summary {
                    let from = self.counter.count(&summary);
                    summary = summarize(ctx, from - 1, self.counter.as_ref(), false);
                    dropped.push(Dropped::Summary {
                        from_tokens: from,
                        to_tokens: self.counter.count(&summary),
                    });
                } else if let Some(last) = lines.pop() {
                    dropped.push(Dropped::Exemplar { id: last.id });
                } else {
                    return Err(self.too_large(count, max));
                }
                count = self.counter.count(&self.render(&summary, &ctx.current, &lines));
                trace.push(count);
            }
            summary
        };

        let rendered = self.render(&summary, &ctx.current, &lines);
        let token_count = self.counter.count(&rendered);
        debug_assert!(token_count <= max);
        Ok(Prompt {
            instruction: self.instruction.clone(),
            summary,
            current: ctx.current.clone(),
            exemplars: lines,
            answer_format: self.answer_format.clone(),
            rendered,
            token_count,
            dropped,
            compression_trace: trace,
        })
    }

    fn too_large(&self, count: usize, max: usize) -> Error {
        Error::Composition(format!(
            "instruction and current utterance alone need {count} tokens, budget is {max}"
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::count_tokens;

    fn turn(u: &str, a: &str) -> Turn {
        Turn {
            user: u.into(),
            agent: a.into(),
            user_embedding: vec![],
            agent_embedding: vec![],
        }
    }

    fn ctx(n: usize) -> DialogueContext {
        DialogueContext {
            turns: (0..n)
                .map(|i| turn(&format!("i need option {i} please"), &format!("sure, option {i} noted")))
                .collect(),
            current: "book a taxi".into(),
            current_embedding: vec![],
        }
    }

    fn lines(n: usize) -> Vec<ExemplarLine> {
        (0..n)
            .map(|i| ExemplarLine {
                id: format!("e{i}"),
                text: format!("example utterance number {i}"),
                label: format!("intent_{i}"),
            })
            .collect()
    }

    #[test]
    fn summary_edge_cases() {
        assert_eq!(summarize_history(&ctx(0), 128, &RuleTokenizer), "");
        assert_eq!(summarize_history(&ctx(3), 0, &RuleTokenizer), "");
        let all = summarize_history(&ctx(2), 500, &RuleTokenizer);
        assert_eq!(
            all,
            "User: i need option 0 please\nAgent: sure, option 0 noted\n\
             User: i need option 1 please\nAgent: sure, option 1 noted"
        );
    }

    #[test]
    fn summary_keeps_most_recent_turns_chronologically() {
        let c = ctx(10);
        // Token-count oracle: each rendered turn costs the same here.
        let per_turn = count_tokens(&render_turn(&c.turns[0]));
        let s = summarize_history(&c, per_turn * 3 + per_turn / 2, &RuleTokenizer);
        let expected = (7..10).map(|i| render_turn(&c.turns[i])).collect::<Vec<_>>().join("\n");
        assert_eq!(s, expected);
    }

    #[test]
    fn compose_with_ample_budget() {
        let comp = PromptComposer::default();
        let p = comp
            .compose(&ctx(1), &lines(2), &BudgetConfig::default(), &Permutation::Identity)
            .unwrap();
        assert!(p.rendered.contains("User: example utterance number 0 => Intent: intent_0"));
        assert!(p.rendered.contains("User: example utterance number 1 => Intent: intent_1"));
        assert_eq!(p.token_count, count_tokens(&p.rendered));
        assert!(p.dropped.is_empty());
        let i = p.rendered.find("Context summary").unwrap();
        let j = p.rendered.find("Current utterance").unwrap();
        let k = p.rendered.find("Exemplars:").unwrap();
        assert!(p.rendered.starts_with(DEFAULT_INSTRUCTION) && i < j && j < k);
    }

    #[test]
    fn compose_drops_trailing_exemplar() {
        let comp = PromptComposer::default();
        let zero_ctx = ctx(0);
        let full = comp
            .compose(&zero_ctx, &lines(3), &BudgetConfig::default(), &Permutation::Identity)
            .unwrap();
        let budget = BudgetConfig {
            max_prompt_tokens: full.token_count - 1,
            summary_token_cap: 16,
            ..Default::default()
        };
        let p = comp.compose(&zero_ctx, &lines(3), &budget, &Permutation::Identity).unwrap();
        assert_eq!(p.exemplars.len(), 2);
        assert_eq!(p.dropped, vec![Dropped::Exemplar { id: "e2".into() }]);
    }

    #[test]
    fn compression_shrinks_summary_before_exemplars() {
        let comp = PromptComposer::default();
        let c = ctx(6);
        let base = comp
            .compose(&c, &lines(4), &BudgetConfig { max_prompt_tokens: 4000, summary_token_cap: 4000, ..Default::default() }, &Permutation::Identity)
            .unwrap();
        let budget = BudgetConfig {
            max_prompt_tokens: base.token_count - 30,
            summary_token_cap: 128,
            ..Default::default()
        };
        let p = comp.compose(&c, &lines(4), &budget, &Permutation::Identity).unwrap();
        assert!(p.token_count <= budget.max_prompt_tokens);
        assert!(matches!(p.dropped[0], Dropped::Summary { .. }));
        assert_eq!(p.exemplars.len(), 4);
        assert!(p.compression_trace.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn permutation_preserves_token_count() {
        let comp = PromptComposer::default();
        let c = ctx(2);
        let id = comp.compose(&c, &lines(4), &BudgetConfig::default(), &Permutation::Identity).unwrap();
        let rev = comp.compose(&c, &lines(4), &BudgetConfig::default(), &Permutation::Reverse).unwrap();
        let seeded = comp
            .compose(&c, &lines(4), &BudgetConfig::default(), &Permutation::Seeded { seed: 3 })
            .unwrap();
        assert_eq!(id.token_count, rev.token_count);
        assert_eq!(id.token_count, seeded.token_count);
        assert_eq!(rev.exemplars[0].id, "e3");
        assert!(Permutation::Explicit { order: vec![0, 0] }.apply(&[1, 2]).is_err());
    }

    #[test]
    fn oversized_instruction_fails() {
        let comp = PromptComposer::new(PromptTemplate::default(), "word ".repeat(50), "ok");
        let budget = BudgetConfig { max_prompt_tokens: 20, summary_token_cap: 10, ..Default::default() };
        assert!(matches!(
            comp.compose(&ctx(3), &lines(2), &budget, &Permutation::Identity),
            Err(Error::Composition(_))
        ));
    }

    #[test]
    fn fill_mode_hits_budget_exactly_when_history_suffices() {
        let comp = PromptComposer::default();
        let c = ctx(30);
        for target in [120, 150, 181] {
            let budget = BudgetConfig {
                max_prompt_tokens: target,
                summary_token_cap: target,
                fill_summary: true,
                ..Default::default()
            };
            let p = comp.compose(&c, &lines(3), &budget, &Permutation::Identity).unwrap();
            assert_eq!(p.token_count, target);
        }
    }

    #[test]
    fn template_validation() {
        assert!(PromptTemplate::parse("{INSTRUCTION} {SUMMARY} {CURRENT} {EXEMPLARS}").is_err());
        assert!(PromptTemplate::parse("{SUMMARY} {INSTRUCTION} {CURRENT} {EXEMPLARS} {ANSWER_FORMAT}").is_err());
        assert!(PromptTemplate::parse("{INSTRUCTION}|{SUMMARY}|{CURRENT}|{EXEMPLARS}|{ANSWER_FORMAT}").is_ok());
    }
}
