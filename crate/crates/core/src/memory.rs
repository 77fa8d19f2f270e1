//! The exemplar memory: labeled utterances with unit embeddings, a label
//! index, and the lexical statistics BM25 needs.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, normalize};
use crate::text::terms;

pub const MEMORY_MAGIC: &[u8; 10] = b"DIVSEL-MEM";
pub const MEMORY_FORMAT_VERSION: u32 = 1;

const NORM_TOLERANCE: f64 = 1e-6;

/// One labeled memory item, also the ingestion record shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub id: String,
    pub text: String,
    pub label: String,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1.is_finite() && self.k1 >= 0.0) {
            return Err(Error::InvalidConfig(format!("k1 must be >= 0, got {}", self.k1)));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(Error::InvalidConfig(format!("b must be in [0,1], got {}", self.b)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
struct LexicalStats {
    doc_freq: HashMap<String, u32>,
    term_counts: Vec<HashMap<String, u32>>,
    doc_len: Vec<u32>,
    avg_doc_len: f64,
}

impl LexicalStats {
    fn build(exemplars: &[Exemplar]) -> Self {
        let mut doc_freq: HashMap<String, u32> = HashMap::new();
        let mut term_counts = Vec::with_capacity(exemplars.len());
        let mut doc_len = Vec::with_capacity(exemplars.len());
        for ex in exemplars {
            let toks = terms(&ex.text);
            let mut counts: HashMap<String, u32> = HashMap::new();
            for t in &toks {
                *counts.entry(t.clone()).or_default() += 1;
            }
            for t in counts.keys() {
                *doc_freq.entry(t.clone()).or_default() += 1;
            }
            doc_len.push(toks.len() as u32);
            term_counts.push(counts);
        }
        let total: u64 = doc_len.iter().map(|&l| l as u64).sum();
        let avg_doc_len = if exemplars.is_empty() {
            0.0
        } else {
            total as f64 / exemplars.len() as f64
        };
        Self {
            doc_freq,
            term_counts,
            doc_len,
            avg_doc_len,
        }
    }
}

/// Immutable retrieval memory.
#[derive(Debug, Clone)]
pub struct Memory {
    exemplars: Vec<Exemplar>,
    id_index: HashMap<String, usize>,
    label_index: BTreeMap<String, Vec<usize>>,
    lexical: LexicalStats,
    dim: usize,
    bm25: Bm25Params,
}

impl Memory {
    /// Validates, normalizes and indexes a stream of records.
    pub fn ingest<I>(records: I, bm25: Bm25Params) -> Result<Self>
    where
        I: IntoIterator<Item = Exemplar>,
    {
        let mut exemplars: Vec<Exemplar> = records.into_iter().collect();
        for ex in &mut exemplars {
            if ex.embedding.iter().any(|x| !x.is_finite()) {
                return Err(Error::Ingest(format!("non-finite embedding for `{}`", ex.id)));
            }
            normalize(&mut ex.embedding).map_err(|_| {
                Error::Ingest(format!("zero embedding for `{}`", ex.id))
            })?;
        }
        Self::build(exemplars, bm25)
    }

    /// Reads line-delimited JSON records. Blank lines are skipped.
    pub fn ingest_jsonl<R: BufRead>(reader: R, bm25: Bm25Params) -> Result<Self> {
        let mut records = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Exemplar = serde_json::from_str(&line)
                .map_err(|e| Error::Ingest(format!("line {}: {e}", lineno + 1)))?;
            records.push(rec);
        }
        Self::ingest(records, bm25)
    }

    fn build(exemplars: Vec<Exemplar>, bm25: Bm25Params) -> Result<Self> {
        bm25.validate()?;
        let first = exemplars
            .first()
            .ok_or_else(|| Error::Ingest("empty record stream".into()))?;
        let dim = first.embedding.len();
        if dim == 0 {
            return Err(Error::Ingest(format!("empty embedding for `{}`", first.id)));
        }
        let mut id_index = HashMap::with_capacity(exemplars.len());
        let mut label_index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, ex) in exemplars.iter().enumerate() {
            if ex.embedding.len() != dim {
                return Err(Error::DimensionMismatch {
                    id: ex.id.clone(),
                    expected: dim,
                    got: ex.embedding.len(),
                });
            }
            if ex.label.is_empty() {
                return Err(Error::Ingest(format!("empty label for `{}`", ex.id)));
            }
            if (norm(&ex.embedding) - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::Ingest(format!("embedding for `{}` is not unit norm", ex.id)));
            }
            if id_index.insert(ex.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(ex.id.clone()));
            }
            label_index.entry(ex.label.clone()).or_default().push(i);
        }
        let lexical = LexicalStats::build(&exemplars);
        Ok(Self {
            exemplars,
            id_index,
            label_index,
            lexical,
            dim,
            bm25,
        })
    }

    pub fn len(&self) -> usize {
        self.exemplars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exemplars.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bm25_params(&self) -> Bm25Params {
        self.bm25
    }

    pub fn exemplars(&self) -> &[Exemplar] {
        &self.exemplars
    }

    pub fn get(&self, ordinal: usize) -> &Exemplar {
        &self.exemplars[ordinal]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.id_index.get(id).copied()
    }

    pub fn by_id(&self, id: &str) -> Result<&Exemplar> {
        self.position(id)
            .map(|i| &self.exemplars[i])
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    /// Label → exemplar ordinals, in ingestion order.
    pub fn label_index(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.label_index
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.label_index.keys().map(String::as_str)
    }

    pub fn average_doc_len(&self) -> f64 {
        self.lexical.avg_doc_len
    }

    pub fn doc_freq(&self, term: &str) -> u32 {
        self.lexical.doc_freq.get(term).copied().unwrap_or(0)
    }

    /// Okapi BM25 of `query` against one exemplar.
    pub fn bm25_score(&self, query: &str, exemplar_id: &str) -> Result<f64> {
        let pos = self
            .position(exemplar_id)
            .ok_or_else(|| Error::UnknownId(exemplar_id.to_string()))?;
        Ok(self.bm25_at(&query_terms(query), pos))
    }

    /// BM25 of `query` against every exemplar, by ordinal.
    pub fn bm25_all(&self, query: &str) -> Vec<f64> {
        let q = query_terms(query);
        (0..self.len()).map(|i| self.bm25_at(&q, i)).collect()
    }

    fn bm25_at(&self, query: &[String], ordinal: usize) -> f64 {
        let Bm25Params { k1, b } = self.bm25;
        let n = self.len() as f64;
        let counts = &self.lexical.term_counts[ordinal];
        let len_ratio = if self.lexical.avg_doc_len > 0.0 {
            self.lexical.doc_len[ordinal] as f64 / self.lexical.avg_doc_len
        } else {
            1.0
        };
        let mut score = 0.0;
        for term in query {
            let Some(&tf) = counts.get(term) else { continue };
            let tf = tf as f64;
            let df = self.doc_freq(term) as f64;
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * len_ratio));
        }
        score
    }

    pub fn persist(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path)
            .map_err(|e| Error::Load(format!("cannot open {}: {e}", path.display())))?;
        Self::read_from(&mut BufReader::new(file))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MEMORY_MAGIC)?;
        w.write_u32::<LittleEndian>(MEMORY_FORMAT_VERSION)?;
        w.write_f64::<LittleEndian>(self.bm25.k1)?;
        w.write_f64::<LittleEndian>(self.bm25.b)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        w.write_u32::<LittleEndian>(self.len() as u32)?;
        for ex in &self.exemplars {
            write_str(w, &ex.id)?;
            write_str(w, &ex.text)?;
            write_str(w, &ex.label)?;
            for &x in &ex.embedding {
                w.write_f64::<LittleEndian>(x)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 10];
        r.read_exact(&mut magic).map_err(load_err("header"))?;
        if &magic != MEMORY_MAGIC {
            return Err(Error::Load("bad magic header, not a memory file".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(load_err("version"))?;
        if version != MEMORY_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: MEMORY_FORMAT_VERSION,
            });
        }
        let k1 = r.read_f64::<LittleEndian>().map_err(load_err("k1"))?;
        let b = r.read_f64::<LittleEndian>().map_err(load_err("b"))?;
        let dim = r.read_u32::<LittleEndian>().map_err(load_err("dim"))? as usize;
        let n = r.read_u32::<LittleEndian>().map_err(load_err("count"))? as usize;
        let mut exemplars = Vec::with_capacity(n.min(1 << 20));
        for i in 0..n {
            let ctx = || format!("record {i} of {n}");
            let id = read_str(r).map_err(|e| Error::Load(format!("{}: {e}", ctx())))?;
            let text = read_str(r).map_err(|e| Error::Load(format!("{}: {e}", ctx())))?;
            let label = read_str(r).map_err(|e| Error::Load(format!("{}: {e}", ctx())))?;
            let mut embedding = vec![0.0; dim];
            r.read_f64_into::<LittleEndian>(&mut embedding)
                .map_err(|e| Error::Load(format!("{}: {e}", ctx())))?;
            exemplars.push(Exemplar {
                id,
                text,
                label,
                embedding,
            });
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(Error::Load("trailing bytes after last record".into()));
        }
        Self::build(exemplars, Bm25Params { k1, b }).map_err(|e| Error::Load(e.to_string()))
    }
}

fn query_terms(query: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    terms(query)
        .into_iter()
        .filter(|t| seen.insert(t.clone()))
        .collect()
}

fn load_err(what: &'static str) -> impl Fn(io::Error) -> Error {
    move |e| Error::Load(format!("reading {what}: {e}"))
}

fn write_str<W: Write>(w: &mut W, s: &str) -> io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str<R: Read>(r: &mut R) -> io::Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = Vec::with_capacity(len.min(1 << 20));
    r.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated string"));
    }
    String::from_utf8(buf).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

/// Boundary for the vector-similarity backend. Implementations return the
/// cosine between `query` and every exemplar, indexed by ordinal.
pub trait VectorIndex: Send + Sync {
    fn similarities(&self, memory: &Memory, query: &[f64]) -> Result<Vec<f64>>;
}

/// Reference backend: one pass over the memory.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactScan;

impl VectorIndex for ExactScan {
    fn similarities(&self, memory: &Memory, query: &[f64]) -> Result<Vec<f64>> {
        let qn = checked_query_norm(memory.dim(), query)?;
        Ok(memory
            .exemplars()
            .iter()
            .map(|ex| scaled_cosine(query, qn, &ex.embedding))
            .collect())
    }
}

/// Contiguous row-major copy of the embeddings, scanned in parallel chunks.
#[derive(Debug, Clone)]
pub struct FlatIndex {
    dim: usize,
    rows: Vec<f64>,
}

impl FlatIndex {
    pub fn build(memory: &Memory) -> Self {
        let rows = memory
            .exemplars()
            .iter()
            .flat_map(|ex| ex.embedding.iter().copied())
            .collect();
        Self {
            dim: memory.dim(),
            rows,
        }
    }
}

impl VectorIndex for FlatIndex {
    fn similarities(&self, memory: &Memory, query: &[f64]) -> Result<Vec<f64>> {
        if self.rows.len() != memory.len() * self.dim {
            return Err(Error::InvalidInput("index was built for a different memory".into()));
        }
        let qn = checked_query_norm(self.dim, query)?;
        Ok(self
            .rows
            .par_chunks(self.dim)
            .map(|row| scaled_cosine(query, qn, row))
            .collect())
    }
}

fn checked_query_norm(dim: usize, query: &[f64]) -> Result<f64> {
    if query.len() != dim {
        return Err(Error::DimensionMismatch {
            id: "query".into(),
            expected: dim,
            got: query.len(),
        });
    }
    if query.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("query vector".into()));
    }
    let qn = norm(query);
    if qn == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(qn)
}

#[inline]
fn scaled_cosine(query: &[f64], query_norm: f64, row: &[f64]) -> f64 {
    (dot(query, row) / (query_norm * norm(row))).clamp(-1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ex(id: &str, text: &str, label: &str, e: &[f64]) -> Exemplar {
        Exemplar {
            id: id.into(),
            text: text.into(),
            label: label.into(),
            embedding: e.to_vec(),
        }
    }

    fn three() -> Memory {
        Memory::ingest(
            vec![
                ex("e1", "need a taxi now", "taxi", &[1.0, 0.0, 0.0, 0.0]),
                ex("e2", "book a table for two", "restaurant", &[0.0, 1.0, 0.0, 0.0]),
                ex("e3", "cancel flight", "flight", &[0.0, 0.0, 1.0, 0.0]),
            ],
            Bm25Params::default(),
        )
        .unwrap()
    }

    #[test]
    fn ingest_builds_memory() {
        let m = three();
        assert_eq!(m.len(), 3);
        assert_eq!(m.dim(), 4);
        let total: usize = m.label_index().values().map(Vec::len).sum();
        assert_eq!(total, m.len());
    }

    #[test]
    fn ingest_normalizes_embeddings() {
        let m = Memory::ingest(vec![ex("a", "x", "l", &[2.0, 0.0])], Bm25Params::default()).unwrap();
        assert!((norm(&m.get(0).embedding) - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn ingest_rejects_bad_streams() {
        let dup = Memory::ingest(
            vec![ex("e1", "a", "l", &[1.0, 0.0]), ex("e1", "b", "l", &[0.0, 1.0])],
            Bm25Params::default(),
        );
        assert!(matches!(dup, Err(Error::DuplicateId(id)) if id == "e1"));

        let dim = Memory::ingest(
            vec![ex("e1", "a", "l", &[1.0, 0.0]), ex("e2", "b", "l", &[0.0, 1.0, 0.0])],
            Bm25Params::default(),
        );
        assert!(matches!(dim, Err(Error::DimensionMismatch { id, .. }) if id == "e2"));

        let empty = Memory::ingest(Vec::new(), Bm25Params::default());
        assert!(matches!(empty, Err(Error::Ingest(_))));

        let zero = Memory::ingest(vec![ex("z", "a", "l", &[0.0, 0.0])], Bm25Params::default());
        assert!(zero.is_err());

        let nolabel = Memory::ingest(vec![ex("z", "a", "", &[1.0, 0.0])], Bm25Params::default());
        assert!(nolabel.is_err());
    }

    #[test]
    fn bm25_zero_without_overlap() {
        let m = three();
        assert_eq!(m.bm25_score("refund order", "e3").unwrap(), 0.0);
    }

    #[test]
    fn bm25_matches_textbook_computation() {
        let m = three();
        // Independent evaluation: N=3, df(taxi)=1, doc "need a taxi now" has
        // 4 terms, avgdl = (4 + 5 + 2) / 3.
        let (k1, b) = (1.2_f64, 0.75_f64);
        let n = 3.0_f64;
        let df = 1.0_f64;
        let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
        let avgdl = 11.0 / 3.0;
        let tf = 1.0;
        let expected = idf * (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * 4.0 / avgdl));
        let got = m.bm25_score("taxi", "e1").unwrap();
        assert!(got > 0.0);
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert_eq!(got, m.bm25_score("taxi", "e1").unwrap());
    }

    #[test]
    fn bm25_unknown_id() {
        assert!(matches!(three().bm25_score("taxi", "nope"), Err(Error::UnknownId(_))));
    }

    #[test]
    fn flat_index_matches_exact_scan() {
        let m = three();
        let q = [0.3, -0.2, 0.9, 0.1];
        let a = ExactScan.similarities(&m, &q).unwrap();
        let b = FlatIndex::build(&m).similarities(&m, &q).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn load_rejects_version_and_truncation() {
        let m = three();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();

        let mut v0 = buf.clone();
        v0[10..14].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(
            Memory::read_from(&mut v0.as_slice()),
            Err(Error::VersionMismatch { found: 0, expected: 1 })
        ));

        for cut in [5, 20, buf.len() / 2, buf.len() - 1] {
            let r = Memory::read_from(&mut &buf[..cut]);
            assert!(matches!(r, Err(Error::Load(_))), "cut at {cut}");
        }

        let mut extra = buf.clone();
        extra.push(0);
        assert!(Memory::read_from(&mut extra.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn bm25_monotone_in_term_frequency(extra in 1usize..6, filler in 0usize..4) {
            let base = format!("taxi{}", " please".repeat(filler));
            let boosted = format!("{base}{}", " taxi".repeat(extra));
            let build = |t: &str| Memory::ingest(
                vec![
                    ex("a", t, "x", &[1.0, 0.0]),
                    ex("b", "book a table", "y", &[0.0, 1.0]),
                    ex("c", "train to cambridge please", "z", &[1.0, 1.0]),
                ],
                Bm25Params::default(),
            ).unwrap();
            let lo = build(&base).bm25_score("taxi", "a").unwrap();
            let hi = build(&boosted).bm25_score("taxi", "a").unwrap();
            prop_assert!(hi >= lo - 1e-12, "{hi} < {lo}");
        }
    }
}
