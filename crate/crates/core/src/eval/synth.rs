//! Seeded synthetic intent corpus.
//!
//! Labels are grouped into domains. Each label has a unit center that
//! shares a component with its domain, and exemplars are tight
//! perturbations of their center. An ambiguous query mixes a distractor
//! label from the same domain with a smaller share of its gold label, so
//! the most similar exemplars all carry the distractor.

use std::io::Write;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::{DialogueContext, Turn};
use crate::error::{Error, Result};
use crate::eval::corpus::{write_jsonl, EvalInstance};
use crate::linalg::normalize;
use crate::memory::{Bm25Params, Exemplar, Memory};

const DOMAINS: [&str; 12] = [
    "restaurant", "hotel", "taxi", "train", "attraction", "hospital", "police", "bus", "flight", "movie",
    "bank", "weather",
];
const ACTIONS: [&str; 8] = ["find", "book", "cancel", "price", "address", "hours", "reviews", "change"];
const OPENERS: [&str; 6] = ["please", "i need to", "can you", "could i", "help me", "i would like to"];
const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ter", "van", "su", "rel", "po", "dan", "fi", "gor", "ne", "bas", "ul", "tro", "me",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub labels: usize,
    pub per_label: usize,
    /// Fraction of queries whose embedding leans toward a distractor label.
    pub ambiguity: f64,
    pub instances: usize,
    pub dim: usize,
    pub labels_per_domain: usize,
    /// Norm of the perturbation around a label center.
    pub spread: f64,
    pub min_turns: usize,
    pub max_turns: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            labels: 50,
            per_label: 20,
            ambiguity: 0.6,
            instances: 200,
            dim: 64,
            labels_per_domain: 5,
            spread: 0.15,
            min_turns: 14,
            max_turns: 18,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.labels < 2 || self.per_label == 0 || self.instances == 0 || self.dim < 2 || self.labels_per_domain == 0 {
            return Err(Error::InvalidConfig(
                "synthetic corpus needs >= 2 labels and positive sizes".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return Err(Error::InvalidConfig(format!("ambiguity must be in [0,1], got {}", self.ambiguity)));
        }
        if self.min_turns > self.max_turns || !(self.spread >= 0.0) {
            return Err(Error::InvalidConfig("turn range or spread is invalid".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthCorpus {
    pub spec: SynthSpec,
    pub exemplars: Vec<Exemplar>,
    pub instances: Vec<EvalInstance>,
    /// For each instance, the label its query leans toward when ambiguous.
    pub distractors: Vec<Option<String>>,
}

impl SynthCorpus {
    pub fn memory(&self) -> Result<Memory> {
        Memory::ingest(self.exemplars.iter().cloned(), Bm25Params::default())
    }

    pub fn write_memory_jsonl<W: Write>(&self, w: &mut W) -> Result<()> {
        write_jsonl(&self.exemplars, w)
    }

    pub fn write_instances_jsonl<W: Write>(&self, w: &mut W) -> Result<()> {
        write_jsonl(&self.instances, w)
    }
}

struct LabelInfo {
    name: String,
    domain: usize,
    center: Vec<f64>,
    keywords: [String; 3],
}

fn gaussian_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if normalize(&mut v).is_ok() {
            return v;
        }
    }
}

fn blend(parts: &[(f64, &[f64])]) -> Vec<f64> {
    let mut out = vec![0.0; parts[0].1.len()];
    for (w, v) in parts {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += w * x;
        }
    }
    normalize(&mut out).expect("blend of independent directions is nonzero");
    out
}

fn perturb(rng: &mut ChaCha8Rng, center: &[f64], spread: f64) -> Vec<f64> {
    let noise = gaussian_unit(rng, center.len());
    blend(&[(1.0, center), (spread, &noise)])
}

fn word(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(2..=3);
    (0..n).map(|_| *SYLLABLES.choose(rng).expect("non-empty")).collect()
}

fn domain_name(d: usize) -> String {
    match d / DOMAINS.len() {
        0 => DOMAINS[d].to_string(),
        r => format!("{}{}", DOMAINS[d % DOMAINS.len()], r + 1),
    }
}

fn action_name(a: usize) -> String {
    match a / ACTIONS.len() {
        0 => ACTIONS[a].to_string(),
        r => format!("{}{}", ACTIONS[a % ACTIONS.len()], r + 1),
    }
}

fn utterance(rng: &mut ChaCha8Rng, domain: &str, kws: &[&str]) -> String {
    let opener = OPENERS.choose(rng).expect("non-empty");
    format!("{opener} {} {domain} {} {}", kws[0], kws[1], kws[2])
}

/// Generates the memory and the evaluation instances. The same spec
/// always yields the same corpus.
pub fn synth_corpus(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_domains = spec.labels.div_ceil(spec.labels_per_domain);
    let domain_centers: Vec<Vec<f64>> = (0..n_domains).map(|_| gaussian_unit(&mut rng, spec.dim)).collect();

    let labels: Vec<LabelInfo> = (0..spec.labels)
        .map(|i| {
            let domain = i / spec.labels_per_domain;
            let own = gaussian_unit(&mut rng, spec.dim);
            LabelInfo {
                name: format!("{}_{}", domain_name(domain), action_name(i % spec.labels_per_domain)),
                domain,
                center: blend(&[(0.6, &domain_centers[domain]), (0.8, &own)]),
                keywords: [word(&mut rng), word(&mut rng), word(&mut rng)],
            }
        })
        .collect();

    let mut exemplars = Vec::with_capacity(spec.labels * spec.per_label);
    for lab in &labels {
        for _ in 0..spec.per_label {
            let kws: Vec<&str> = (0..3).map(|_| lab.keywords.choose(&mut rng).expect("three").as_str()).collect();
            exemplars.push(Exemplar {
                id: format!("ex-{:05}", exemplars.len()),
                text: utterance(&mut rng, &domain_name(lab.domain), &kws),
                label: lab.name.clone(),
                embedding: perturb(&mut rng, &lab.center, spec.spread),
            });
        }
    }

    let mut instances = Vec::with_capacity(spec.instances);
    let mut distractors = Vec::with_capacity(spec.instances);
    for n in 0..spec.instances {
        let gold = rng.random_range(0..labels.len());
        let g = &labels[gold];
        let ambiguous = rng.random_bool(spec.ambiguity);
        let (embedding, text, distractor) = if ambiguous {
            let peers: Vec<usize> = (0..labels.len())
                .filter(|&j| j != gold && labels[j].domain == g.domain)
                .collect();
            let d = match peers.choose(&mut rng) {
                Some(&d) => d,
                None => (gold + 1) % labels.len(),
            };
            let share = rng.random_range(0.1..0.6);
            let noise = gaussian_unit(&mut rng, spec.dim);
            let e = blend(&[(0.85, &labels[d].center), (share, &g.center), (2.0 * spec.spread, &noise)]);
            let kws = [labels[d].keywords[0].as_str(), labels[d].keywords[1].as_str(), g.keywords[2].as_str()];
            (e, utterance(&mut rng, &domain_name(g.domain), &kws), Some(labels[d].name.clone()))
        } else {
            let kws: Vec<&str> = g.keywords.iter().map(String::as_str).collect();
            (perturb(&mut rng, &g.center, spec.spread), utterance(&mut rng, &domain_name(g.domain), &kws), None)
        };

        let n_turns = rng.random_range(spec.min_turns..=spec.max_turns);
        let turns = (0..n_turns)
            .map(|t| {
                let other = &labels[rng.random_range(0..labels.len())];
                let dom = domain_name(other.domain);
                Turn {
                    user: format!("for the {dom} part i want {} number {} near the centre", other.keywords[0], t + 1),
                    agent: format!("sure, the {dom} {} option {} is noted", other.keywords[1], t + 1),
                    user_embedding: perturb(&mut rng, &other.center, 0.5),
                    agent_embedding: perturb(&mut rng, &domain_centers[other.domain], 0.5),
                }
            })
            .collect();
        instances.push(EvalInstance {
            id: format!("dlg-{n:04}"),
            dialogue: DialogueContext {
                turns,
                current: text,
                current_embedding: embedding,
            },
            gold: g.name.clone(),
            slots: None,
        });
        distractors.push(distractor);
    }

    Ok(SynthCorpus {
        spec: spec.clone(),
        exemplars,
        instances,
        distractors,
    })
}
