//! Label scoring with a yes/no verifier and the arg-max decision rule.
//!
//! For each candidate label `y` the verifier is asked "Is intent = y?" with
//! the full prompt as context and returns `log P(yes)` and `log P(no)`. The
//! score is their difference; calibrated probabilities are
//! `logistic(score / tau_c)`. Temperature never changes the decision.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::Prompt;
use crate::retrieval::Pool;

pub const DEFAULT_TAU_C: f64 = 1.0;
pub const TAU_C_RANGE: (f64, f64) = (0.9, 1.3);
pub const DEFAULT_SHORTLIST: usize = 3;
pub const WIRE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierRequest {
    pub prompt_text: String,
    pub question_text: String,
    pub label: String,
}

impl VerifierRequest {
    pub fn new(prompt_text: &str, label: &str) -> Self {
        Self {
            prompt_text: prompt_text.to_string(),
            question_text: question(label),
            label: label.to_string(),
        }
    }
}

pub fn question(label: &str) -> String {
    format!("Is intent = {label}?")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifierReply {
    pub logp_yes: f64,
    pub logp_no: f64,
}

impl VerifierReply {
    /// Reply whose log-odds equal `score`.
    pub fn from_log_odds(score: f64) -> Self {
        Self {
            logp_yes: -ln_1p_exp(-score),
            logp_no: -ln_1p_exp(score),
        }
    }

    pub fn log_odds(&self) -> f64 {
        self.logp_yes - self.logp_no
    }

    fn check(&self) -> Result<()> {
        for (name, v) in [("logp_yes", self.logp_yes), ("logp_no", self.logp_no)] {
            if !v.is_finite() || v > 1e-9 {
                return Err(Error::Protocol(format!("{name} = {v} is not a log-probability")));
            }
        }
        Ok(())
    }
}

fn ln_1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Request/response boundary to the scoring model.
pub trait Verifier: Send + Sync {
    fn query(&self, request: &VerifierRequest) -> Result<VerifierReply>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierOutput {
    pub scores: BTreeMap<String, f64>,
    pub calibrated: BTreeMap<String, f64>,
    pub decision: String,
    pub candidate_set: Vec<String>,
    pub tau_c: f64,
    pub verifier_calls: u64,
}

/// Labels exposed by the exemplars (first-appearance order), then labels of
/// the first `shortlist_size` pool items not already present.
pub fn candidate_labels<S: AsRef<str>>(
    exemplar_labels: &[S],
    pool: &Pool,
    shortlist_size: usize,
) -> Result<Vec<String>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    let shortlist = pool.candidates.iter().take(shortlist_size).map(|c| c.label.as_str());
    for label in exemplar_labels.iter().map(AsRef::as_ref).chain(shortlist) {
        if seen.insert(label) {
            out.push(label.to_string());
        }
    }
    if out.is_empty() {
        return Err(Error::NoCandidates);
    }
    Ok(out)
}

/// Arg max with ties going to the lexicographically smallest label.
pub fn decide(scores: &BTreeMap<String, f64>) -> Option<&str> {
    let mut best: Option<(&str, f64)> = None;
    for (label, &s) in scores {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((label, s));
        }
    }
    best.map(|(l, _)| l)
}

pub fn check_tau_c(tau_c: f64) -> Result<()> {
    if tau_c > 0.0 && tau_c.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("tau_c must be > 0, got {tau_c}")))
    }
}

/// Queries the verifier once per label and decides. Any failed call
/// discards the whole batch.
pub fn score_labels(prompt: &Prompt, labels: &[String], verifier: &dyn Verifier, tau_c: f64) -> Result<VerifierOutput> {
    check_tau_c(tau_c)?;
    if labels.is_empty() {
        return Err(Error::NoCandidates);
    }
    let replies: Vec<(String, f64)> = labels
        .par_iter()
        .map(|label| {
            let reply = verifier.query(&VerifierRequest::new(&prompt.rendered, label))?;
            reply.check()?;
            Ok((label.clone(), reply.log_odds()))
        })
        .collect::<Result<_>>()?;
    let scores: BTreeMap<String, f64> = replies.into_iter().collect();
    let calibrated = scores.iter().map(|(l, &s)| (l.clone(), logistic(s / tau_c))).collect();
    let decision = decide(&scores).expect("labels are non-empty").to_string();
    Ok(VerifierOutput {
        scores,
        calibrated,
        decision,
        candidate_set: labels.to_vec(),
        tau_c,
        verifier_calls: labels.len() as u64,
    })
}

/// In-process verifier that knows the gold label: `+margin` for gold,
/// `-margin` plus a small per-label deterministic offset otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct MockVerifier {
    pub gold: String,
    pub seed: u64,
    pub margin: f64,
}

impl MockVerifier {
    pub fn new(gold: impl Into<String>, seed: u64, margin: f64) -> Result<Self> {
        if !(margin > 0.0 && margin.is_finite()) {
            return Err(Error::InvalidConfig(format!("mock margin must be > 0, got {margin}")));
        }
        Ok(Self {
            gold: gold.into(),
            seed,
            margin,
        })
    }

    pub fn score(&self, label: &str) -> f64 {
        if label == self.gold {
            return self.margin;
        }
        // Offset in [-margin/4, margin/4), keyed on (seed, label) so that
        // call order never matters.
        let u = (fnv1a(self.seed, label) >> 11) as f64 / (1u64 << 53) as f64;
        -self.margin + self.margin * (u - 0.5) / 2.0
    }
}

fn fnv1a(seed: u64, text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    // Final avalanche so nearby seeds give unrelated offsets.
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^ (h >> 33)
}

impl Verifier for MockVerifier {
    fn query(&self, request: &VerifierRequest) -> Result<VerifierReply> {
        Ok(VerifierReply::from_log_odds(self.score(&request.label)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub url: String,
    /// Environment variable holding the bearer token, if any.
    pub token_env: Option<String>,
    pub timeout_secs: f64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            url: "http://127.0.0.1:8080/v1/verify".into(),
            token_env: Some("DIVSEL_VERIFIER_TOKEN".into()),
            timeout_secs: 30.0,
        }
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    version: u32,
    #[serde(flatten)]
    request: &'a VerifierRequest,
}

/// HTTP client for an external verifier speaking the JSON wire format.
#[derive(Debug)]
pub struct EndpointVerifier {
    config: EndpointConfig,
    token: Option<String>,
    client: reqwest::blocking::Client,
}

impl EndpointVerifier {
    pub fn new(config: EndpointConfig) -> Result<Self> {
        if !(config.timeout_secs > 0.0 && config.timeout_secs.is_finite()) {
            return Err(Error::InvalidConfig("endpoint timeout must be > 0".into()));
        }
        let token = config.token_env.as_deref().and_then(|k| std::env::var(k).ok());
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        Ok(Self { config, token, client })
    }
}

impl Verifier for EndpointVerifier {
    fn query(&self, request: &VerifierRequest) -> Result<VerifierReply> {
        let mut req = self.client.post(&self.config.url).json(&WireRequest {
            version: WIRE_VERSION,
            request,
        });
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| Error::Transport(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Error::Transport(format!("endpoint returned {status}")));
        }
        if !status.is_success() {
            return Err(Error::Protocol(format!("endpoint returned {status}")));
        }
        let body = resp.text().map_err(|e| Error::Transport(e.to_string()))?;
        serde_json::from_str(&body).map_err(|e| Error::Protocol(format!("malformed reply: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::{Candidate, ScoreNormalization};
    use proptest::prelude::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicU64, Ordering};

    fn pool(labels: &[&str]) -> Pool {
        let cands = labels
            .iter()
            .enumerate()
            .map(|(i, l)| Candidate {
                id: format!("p{i}"),
                text: String::new(),
                label: l.to_string(),
                embedding: vec![1.0, 0.0],
                relevance: 1.0 - i as f64 * 0.1,
                vec_score: 1.0 - i as f64 * 0.1,
                lex_score: 0.0,
                bm25: 0.0,
            })
            .collect();
        Pool::from_candidates(cands, 1.0, ScoreNormalization::Raw)
    }

    fn prompt() -> Prompt {
        Prompt {
            instruction: String::new(),
            summary: String::new(),
            current: "hi".into(),
            exemplars: vec![],
            answer_format: String::new(),
            rendered: "prompt body".into(),
            token_count: 2,
            dropped: vec![],
            compression_trace: vec![],
        }
    }

    struct Table(BTreeMap<String, f64>, AtomicU64);

    impl Verifier for Table {
        fn query(&self, r: &VerifierRequest) -> Result<VerifierReply> {
            self.1.fetch_add(1, Ordering::SeqCst);
            Ok(VerifierReply::from_log_odds(self.0[&r.label]))
        }
    }

    fn table(pairs: &[(&str, f64)]) -> Table {
        Table(pairs.iter().map(|(l, s)| (l.to_string(), *s)).collect(), AtomicU64::new(0))
    }

    fn labels(ls: &[&str]) -> Vec<String> {
        ls.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn candidate_label_union() {
        let p = pool(&["c", "d", "a"]);
        assert_eq!(candidate_labels(&["a", "a", "b"], &p, 0).unwrap(), labels(&["a", "b"]));
        assert_eq!(candidate_labels(&["a", "a", "b"], &p, 2).unwrap(), labels(&["a", "b", "c", "d"]));
        let covered = pool(&["a", "b"]);
        assert_eq!(candidate_labels(&["a", "b"], &covered, 2).unwrap(), labels(&["a", "b"]));
        let none: [&str; 0] = [];
        assert!(matches!(candidate_labels(&none, &p, 0), Err(Error::NoCandidates)));
    }

    #[test]
    fn argmax_and_ties() {
        let t = table(&[("a", 2.0), ("b", 1.0)]);
        let out = score_labels(&prompt(), &labels(&["a", "b"]), &t, 1.0).unwrap();
        assert_eq!(out.decision, "a");
        assert_eq!(out.verifier_calls, 2);
        assert_eq!(t.1.load(Ordering::SeqCst), 2);
        assert!((out.scores["a"] - 2.0).abs() < 1e-12);

        let tie = table(&[("b", 0.0), ("a", 0.0)]);
        assert_eq!(score_labels(&prompt(), &labels(&["b", "a"]), &tie, 1.0).unwrap().decision, "a");
    }

    #[test]
    fn mock_exposes_gold_only_when_queried() {
        let m = MockVerifier::new("gold", 7, 2.0).unwrap();
        let with = score_labels(&prompt(), &labels(&["x", "gold", "y"]), &m, 1.0).unwrap();
        assert_eq!(with.decision, "gold");
        let without = score_labels(&prompt(), &labels(&["x", "y"]), &m, 1.0).unwrap();
        assert_ne!(without.decision, "gold");
        let again = score_labels(&prompt(), &labels(&["x", "y"]), &m, 1.0).unwrap();
        assert_eq!(without, again);
        assert!(MockVerifier::new("g", 0, 0.0).is_err());
    }

    struct Broken;
    impl Verifier for Broken {
        fn query(&self, r: &VerifierRequest) -> Result<VerifierReply> {
            if r.label == "bad" {
                Err(Error::Transport("connection reset".into()))
            } else {
                Ok(VerifierReply::from_log_odds(0.0))
            }
        }
    }

    struct Garbled;
    impl Verifier for Garbled {
        fn query(&self, _: &VerifierRequest) -> Result<VerifierReply> {
            Ok(VerifierReply { logp_yes: 0.5, logp_no: f64::NAN })
        }
    }

    #[test]
    fn failures_are_classified() {
        let e = score_labels(&prompt(), &labels(&["ok", "bad"]), &Broken, 1.0).unwrap_err();
        assert!(e.is_retryable());
        let e = score_labels(&prompt(), &labels(&["ok"]), &Garbled, 1.0).unwrap_err();
        assert!(matches!(e, Error::Protocol(_)));
        assert!(score_labels(&prompt(), &labels(&["ok"]), &Broken, 0.0).is_err());
    }

    fn serve_once(status: &'static str, body: &'static str) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                head.push_str(&line);
                if line == "\r\n" {
                    break;
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            let mut out = stream;
            write!(
                out,
                "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
            head + &String::from_utf8(buf).unwrap()
        });
        (format!("http://{addr}/verify"), handle)
    }

    fn endpoint(url: String) -> EndpointVerifier {
        EndpointVerifier::new(EndpointConfig {
            url,
            token_env: None,
            timeout_secs: 5.0,
        })
        .unwrap()
    }

    #[test]
    fn endpoint_round_trip() {
        let (url, h) = serve_once("200 OK", r#"{"logp_yes": -0.1, "logp_no": -2.4}"#);
        let reply = endpoint(url).query(&VerifierRequest::new("the prompt", "book_taxi")).unwrap();
        assert!((reply.log_odds() - 2.3).abs() < 1e-12);
        let seen = h.join().unwrap();
        assert!(seen.contains("\"question_text\":\"Is intent = book_taxi?\""));
        assert!(seen.contains("\"version\":1"));
    }

    #[test]
    fn endpoint_errors() {
        let (url, h) = serve_once("200 OK", r#"{"yes": 1}"#);
        let e = endpoint(url).query(&VerifierRequest::new("p", "l")).unwrap_err();
        assert!(matches!(e, Error::Protocol(_)));
        h.join().unwrap();

        let (url, h) = serve_once("503 Service Unavailable", "{}");
        let e = endpoint(url).query(&VerifierRequest::new("p", "l")).unwrap_err();
        assert!(e.is_retryable());
        h.join().unwrap();

        let closed = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
        let e = endpoint(format!("http://{closed}/v")).query(&VerifierRequest::new("p", "l")).unwrap_err();
        assert!(e.is_retryable());
    }

    proptest! {
        #[test]
        fn calibration_is_monotone_and_bounded(a in -30.0f64..30.0, b in -30.0f64..30.0, t in 0.9f64..1.3) {
            let (pa, pb) = (logistic(a / t), logistic(b / t));
            prop_assert!(pa > 0.0 && pa < 1.0);
            if a < b { prop_assert!(pa <= pb); }
            let r = VerifierReply::from_log_odds(a);
            prop_assert!((r.log_odds() - a).abs() < 1e-9);
            prop_assert!(((r.logp_yes.exp() + r.logp_no.exp()) - 1.0).abs() < 1e-12);
        }
    }
}
