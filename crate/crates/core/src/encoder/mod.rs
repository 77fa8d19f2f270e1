//! Context-aware query encoding: the current utterance cross-attends to
//! past user and agent turns with a recency bias, and the blend is layer
//! normalized.

pub mod loss;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

pub const ENCODER_MAGIC: &[u8; 10] = b"DIVSEL-ENC";
pub const ENCODER_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_LN_EPSILON: f64 = 1e-5;

/// One past exchange: what the user said and how the agent replied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub user: String,
    #[serde(default)]
    pub agent: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub user_embedding: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub agent_embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueContext {
    #[serde(default)]
    pub turns: Vec<Turn>,
    pub current: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub current_embedding: Vec<f64>,
}

impl DialogueContext {
    pub fn single_turn(current: impl Into<String>, embedding: Vec<f64>) -> Self {
        Self {
            turns: Vec::new(),
            current: current.into(),
            current_embedding: embedding,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_v_prime: Matrix,
    pub recency_lambda: f64,
    pub recency_weight: f64,
    pub ln_epsilon: f64,
}

impl EncoderWeights {
    /// Identity query/key projections and zero value projections, which
    /// reduces the encoder to the normalized current-utterance embedding.
    pub fn current_only(dim: usize) -> Self {
        Self {
            w_q: Matrix::identity(dim),
            w_k: Matrix::identity(dim),
            w_v: Matrix::zeros(dim),
            w_v_prime: Matrix::zeros(dim),
            recency_lambda: 0.0,
            recency_weight: 0.0,
            ln_epsilon: DEFAULT_LN_EPSILON,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if [&self.w_k, &self.w_v, &self.w_v_prime].iter().any(|m| m.dim() != d) {
            return Err(Error::InvalidConfig("encoder matrices differ in dimension".into()));
        }
        if !(self.recency_lambda >= 0.0 && self.recency_lambda.is_finite()) {
            return Err(Error::InvalidConfig("recency lambda must be >= 0".into()));
        }
        if !(self.recency_weight >= 0.0 && self.recency_weight.is_finite()) {
            return Err(Error::InvalidConfig("recency weight must be >= 0".into()));
        }
        if !(self.ln_epsilon > 0.0) {
            return Err(Error::InvalidConfig("layer-norm epsilon must be positive".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path)
            .map_err(|e| Error::Load(format!("cannot open {}: {e}", path.display())))?;
        Self::read_from(&mut BufReader::new(f))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(ENCODER_MAGIC)?;
        w.write_u32::<LittleEndian>(ENCODER_FORMAT_VERSION)?;
        w.write_u32::<LittleEndian>(self.dim() as u32)?;
        for m in [&self.w_q, &self.w_k, &self.w_v, &self.w_v_prime] {
            for &x in m.as_slice() {
                w.write_f64::<LittleEndian>(x)?;
            }
        }
        w.write_f64::<LittleEndian>(self.recency_lambda)?;
        w.write_f64::<LittleEndian>(self.recency_weight)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let load = |e: std::io::Error| Error::Load(format!("encoder weights: {e}"));
        let mut magic = [0u8; 10];
        r.read_exact(&mut magic).map_err(load)?;
        if &magic != ENCODER_MAGIC {
            return Err(Error::Load("bad magic header, not an encoder weight file".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(load)?;
        if version != ENCODER_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: ENCODER_FORMAT_VERSION,
            });
        }
        let d = r.read_u32::<LittleEndian>().map_err(load)? as usize;
        let mut mats = Vec::with_capacity(4);
        for _ in 0..4 {
            let mut data = vec![0.0; d * d];
            r.read_f64_into::<LittleEndian>(&mut data).map_err(load)?;
            mats.push(Matrix::from_row_major(d, data)?);
        }
        let recency_lambda = r.read_f64::<LittleEndian>().map_err(load)?;
        let recency_weight = r.read_f64::<LittleEndian>().map_err(load)?;
        let mut mats = mats.into_iter();
        let weights = Self {
            w_q: mats.next().unwrap(),
            w_k: mats.next().unwrap(),
            w_v: mats.next().unwrap(),
            w_v_prime: mats.next().unwrap(),
            recency_lambda,
            recency_weight,
            ln_epsilon: DEFAULT_LN_EPSILON,
        };
        weights.validate()?;
        Ok(weights)
    }
}

/// The encoded query with the attention weights that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedQuery {
    pub vector: Vec<f64>,
    /// Attention over past user turns, oldest first.
    pub user_attention: Vec<f64>,
    /// Attention over past agent turns, oldest first.
    pub agent_attention: Vec<f64>,
}

pub fn encode_context(ctx: &DialogueContext, weights: &EncoderWeights) -> Result<EncodedQuery> {
    weights.validate()?;
    let d = weights.dim();
    check_embedding("current utterance", &ctx.current_embedding, d)?;
    for (t, turn) in ctx.turns.iter().enumerate() {
        check_embedding(&format!("turn {} user", t + 1), &turn.user_embedding, d)?;
        check_embedding(&format!("turn {} agent", t + 1), &turn.agent_embedding, d)?;
    }

    let query = weights.w_q.mul_vec(&ctx.current_embedding);
    let n = ctx.turns.len() + 1;
    let positions: Vec<f64> = (1..n).map(|t| t as f64).collect();

    let user_keys: Vec<Vec<f64>> = ctx.turns.iter().map(|t| weights.w_k.mul_vec(&t.user_embedding)).collect();
    let agent_keys: Vec<Vec<f64>> = ctx.turns.iter().map(|t| weights.w_k.mul_vec(&t.agent_embedding)).collect();
    let user_attention = attention(&query, &user_keys, &positions, n as f64, weights);
    let agent_attention = attention(&query, &agent_keys, &positions, n as f64, weights);

    let mut blended = ctx.current_embedding.clone();
    if !ctx.turns.is_empty() {
        let user_ctx = weighted_sum(ctx.turns.iter().map(|t| t.user_embedding.as_slice()), &user_attention, d);
        let agent_ctx = weighted_sum(ctx.turns.iter().map(|t| t.agent_embedding.as_slice()), &agent_attention, d);
        let a = weights.w_v.mul_vec(&user_ctx);
        let b = weights.w_v_prime.mul_vec(&agent_ctx);
        for i in 0..d {
            blended[i] += a[i] + b[i];
        }
    }
    Ok(EncodedQuery {
        vector: layer_norm(&blended, weights.ln_epsilon),
        user_attention,
        agent_attention,
    })
}

fn check_embedding(what: &str, e: &[f64], d: usize) -> Result<()> {
    if e.len() != d {
        return Err(Error::DimensionMismatch {
            id: what.to_string(),
            expected: d,
            got: e.len(),
        });
    }
    if e.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(())
}

/// Softmax over scaled dot products plus the recency kernel
/// `rho * -lambda * (n - t)`.
pub(crate) fn attention(
    query: &[f64],
    keys: &[Vec<f64>],
    positions: &[f64],
    n: f64,
    weights: &EncoderWeights,
) -> Vec<f64> {
    if keys.is_empty() {
        return Vec::new();
    }
    let scale = (query.len() as f64).sqrt();
    let logits: Vec<f64> = keys
        .iter()
        .zip(positions)
        .map(|(k, &t)| {
            dot(query, k) / scale - weights.recency_weight * weights.recency_lambda * (n - t)
        })
        .collect();
    softmax(&logits)
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn weighted_sum<'a>(vs: impl Iterator<Item = &'a [f64]>, w: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for (v, &wt) in vs.zip(w) {
        for i in 0..d {
            out[i] += wt * v[i];
        }
    }
    out
}

/// Layer normalization without a learned affine transform.
pub fn layer_norm(v: &[f64], eps: f64) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let denom = (var + eps).sqrt();
    v.iter().map(|x| (x - mean) / denom).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::normalize;
    use proptest::prelude::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        let mut v = v.to_vec();
        normalize(&mut v).unwrap();
        v
    }

    fn turn(h: &[f64], g: &[f64]) -> Turn {
        Turn {
            user: "u".into(),
            agent: "a".into(),
            user_embedding: unit(h),
            agent_embedding: unit(g),
        }
    }

    fn identity_weights(d: usize, lambda: f64, rho: f64) -> EncoderWeights {
        EncoderWeights {
            w_v: Matrix::identity(d),
            w_v_prime: Matrix::identity(d),
            recency_lambda: lambda,
            recency_weight: rho,
            ..EncoderWeights::current_only(d)
        }
    }

    #[test]
    fn empty_history_is_normalized_current() {
        let e = unit(&[0.2, 0.5, -0.1, 0.7]);
        let ctx = DialogueContext::single_turn("hi", e.clone());
        let out = encode_context(&ctx, &identity_weights(4, 0.5, 1.0)).unwrap();
        assert_eq!(out.vector, layer_norm(&e, DEFAULT_LN_EPSILON));
        assert!(out.user_attention.is_empty() && out.agent_attention.is_empty());
    }

    #[test]
    fn single_turn_gets_full_weight() {
        let ctx = DialogueContext {
            turns: vec![turn(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0])],
            current: "q".into(),
            current_embedding: unit(&[0.0, 0.0, 1.0]),
        };
        for (lambda, rho) in [(0.0, 0.0), (2.0, 3.0), (0.1, 10.0)] {
            let out = encode_context(&ctx, &identity_weights(3, lambda, rho)).unwrap();
            assert_eq!(out.user_attention, vec![1.0]);
            assert_eq!(out.agent_attention, vec![1.0]);
        }
    }

    #[test]
    fn recency_prefers_later_identical_turns() {
        let h = [0.6, 0.8, 0.0];
        let ctx = DialogueContext {
            turns: vec![turn(&h, &[0.0, 0.0, 1.0]), turn(&h, &[0.0, 0.0, 1.0])],
            current: "q".into(),
            current_embedding: unit(&[1.0, 0.0, 0.0]),
        };
        let out = encode_context(&ctx, &identity_weights(3, 0.5, 1.0)).unwrap();
        let b = &out.user_attention;
        // Equal content scores, so the ratio is exp(rho * lambda).
        assert!(b[1] > b[0]);
        assert!((b[1] / b[0] - (0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn zero_value_projections_ignore_history() {
        let e = unit(&[0.3, -0.4, 0.5]);
        let ctx = DialogueContext {
            turns: vec![turn(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]); 3],
            current: "q".into(),
            current_embedding: e.clone(),
        };
        let out = encode_context(&ctx, &EncoderWeights::current_only(3)).unwrap();
        assert_eq!(out.vector, layer_norm(&e, DEFAULT_LN_EPSILON));
    }

    #[test]
    fn rejects_dimension_mismatch_and_nan() {
        let ctx = DialogueContext::single_turn("q", vec![1.0, 0.0]);
        assert!(matches!(
            encode_context(&ctx, &EncoderWeights::current_only(3)),
            Err(Error::DimensionMismatch { .. })
        ));
        let ctx = DialogueContext::single_turn("q", vec![f64::NAN, 0.0, 1.0]);
        assert!(matches!(
            encode_context(&ctx, &EncoderWeights::current_only(3)),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn weight_file_round_trip() {
        let mut w = identity_weights(3, 0.25, 2.0);
        w.w_q = Matrix::from_row_major(3, (0..9).map(|i| i as f64 * 0.1).collect()).unwrap();
        let mut buf = Vec::new();
        w.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..10], ENCODER_MAGIC);
        let back = EncoderWeights::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, w);
        assert!(EncoderWeights::read_from(&mut &buf[..buf.len() - 3]).is_err());
    }

    proptest! {
        #[test]
        fn attention_is_a_distribution(
            raw in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..6),
            lambda in 0.0f64..2.0,
            rho in 0.0f64..3.0,
        ) {
            let w = identity_weights(4, lambda, rho);
            let q = [0.5, 0.5, 0.5, 0.5];
            let pos: Vec<f64> = (1..=raw.len()).map(|t| t as f64).collect();
            let a = attention(&q, &raw, &pos, raw.len() as f64 + 1.0, &w);
            prop_assert!(a.iter().all(|&x| x >= 0.0));
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn no_recency_weight_means_index_shift_invariance(
            raw in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 1..6),
            lambda in 0.0f64..2.0,
            shift in 0.0f64..50.0,
        ) {
            let w = identity_weights(3, lambda, 0.0);
            let q = [0.2, -0.7, 0.4];
            let n = raw.len() as f64 + 1.0;
            let pos: Vec<f64> = (1..=raw.len()).map(|t| t as f64).collect();
            let shifted: Vec<f64> = pos.iter().map(|p| p + shift).collect();
            let a = attention(&q, &raw, &pos, n, &w);
            let b = attention(&q, &raw, &shifted, n + shift * 0.5, &w);
            prop_assert_eq!(a, b);
        }
    }
}
