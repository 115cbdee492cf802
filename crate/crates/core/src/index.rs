//! Exact top-1 cosine retrieval over a deduplicated phrase store.
//!
//! # File format
//!
//! UTF-8 JSON lines. Line 1 is a header, every further line one record:
//!
//! ```text
//! {"format":"kpvec","version":1,"dim":3,"count":2}
//! {"phrase":"mild cardiomegaly","embedding":[0.6,0.8,0.0]}
//! {"phrase":"no pleural effusion","embedding":[0.0,0.0,1.0]}
//! ```
//!
//! Reals are written as shortest round-trip decimals, so a save/load cycle is
//! bit-exact.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{dot, l2_normalize, Embedding, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::matching::PredictionSet;

pub const FORMAT_NAME: &str = "kpvec";
pub const FORMAT_VERSION: u32 = 1;

/// Phrases embedded per provider call while building.
const EMBED_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexRecord {
    pub phrase: String,
    pub embedding: Embedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    records: Vec<IndexRecord>,
    lookup: HashMap<String, usize>,
}

impl VectorIndex {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            records: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    /// Builds from already-embedded records. Duplicate phrases keep their
    /// first occurrence; embeddings are normalized.
    pub fn from_records(dim: usize, records: impl IntoIterator<Item = IndexRecord>) -> Result<Self> {
        let mut index = Self::empty(dim);
        for r in records {
            if index.lookup.contains_key(&r.phrase) {
                continue;
            }
            if r.embedding.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: r.embedding.dim(),
                });
            }
            let embedding = if r.embedding.is_unit() {
                r.embedding
            } else {
                l2_normalize(&r.embedding)?
            };
            index.push(r.phrase, embedding);
        }
        Ok(index)
    }

    fn push(&mut self, phrase: String, embedding: Embedding) {
        self.lookup.insert(phrase.clone(), self.records.len());
        self.records.push(IndexRecord { phrase, embedding });
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[IndexRecord] {
        &self.records
    }

    pub fn get(&self, phrase: &str) -> Option<&IndexRecord> {
        self.lookup.get(phrase).map(|&i| &self.records[i])
    }

    /// Record with the largest dot product; ties go to the lower index.
    pub fn nearest(&self, query: &[f64]) -> Result<Option<(usize, f64)>> {
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, r) in self.records.iter().enumerate() {
            let s = dot(query, r.embedding.as_slice());
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        Ok(best)
    }
}

/// Embeds distinct phrases in first-seen order.
pub fn build_index<S: AsRef<str>>(phrases: &[S], provider: &dyn EmbeddingProvider) -> Result<VectorIndex> {
    let mut seen = HashMap::new();
    let mut unique: Vec<&str> = Vec::new();
    for p in phrases {
        let p = p.as_ref();
        if seen.insert(p, ()).is_none() {
            unique.push(p);
        }
    }

    let mut index = VectorIndex::empty(provider.dim());
    for chunk in unique.chunks(EMBED_CHUNK) {
        let embedded = provider.embed(chunk).map_err(|e| match e {
            Error::External(m) => Error::External(format!("embedding `{}`..: {m}", chunk[0])),
            other => other,
        })?;
        if embedded.len() != chunk.len() {
            return Err(Error::External(format!(
                "provider returned {} embeddings for {} phrases",
                embedded.len(),
                chunk.len()
            )));
        }
        for (phrase, e) in chunk.iter().zip(embedded) {
            if e.dim() != index.dim {
                return Err(Error::DimensionMismatch {
                    expected: index.dim,
                    got: e.dim(),
                });
            }
            let e = l2_normalize(&e).map_err(|err| Error::Degenerate(format!("`{phrase}`: {err}")))?;
            index.push((*phrase).to_owned(), e);
        }
    }
    Ok(index)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedPhrase {
    pub phrase: String,
    /// Query that retrieved this phrase.
    pub query: usize,
    pub probability: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub hits: Vec<RetrievedPhrase>,
}

impl RetrievalResult {
    pub fn phrases(&self) -> Vec<&str> {
        self.hits.iter().map(|h| h.phrase.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }
}

/// Retrieves one phrase per query whose selection probability is at least
/// `threshold`.
///
/// Hits are ordered by descending probability (query index breaks ties) and
/// a phrase retrieved by several queries is kept once, at its best position.
pub fn retrieve(preds: &PredictionSet, index: &VectorIndex, threshold: f64) -> Result<RetrievalResult> {
    if threshold.is_nan() {
        return Err(Error::validation("threshold is NaN"));
    }
    let mut hits = Vec::new();
    for (q, (&p, v)) in preds.probs.iter().zip(&preds.semantics).enumerate() {
        if p < threshold {
            continue;
        }
        if let Some((i, score)) = index.nearest(v.as_slice())? {
            hits.push(RetrievedPhrase {
                phrase: index.records[i].phrase.clone(),
                query: q,
                probability: p,
                score: score.clamp(-1.0, 1.0),
            });
        }
    }
    hits.sort_by(|a, b| b.probability.total_cmp(&a.probability).then(a.query.cmp(&b.query)));
    let mut seen = HashMap::new();
    hits.retain(|h| seen.insert(h.phrase.clone(), ()).is_none());
    Ok(RetrievalResult { hits })
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    dim: usize,
    count: usize,
}

pub fn save_index(index: &VectorIndex, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_index(index, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_index<W: Write>(index: &VectorIndex, w: &mut W) -> Result<()> {
    let header = Header {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        dim: index.dim,
        count: index.records.len(),
    };
    serde_json::to_writer(&mut *w, &header).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    for r in &index.records {
        serde_json::to_writer(&mut *w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_index(path: impl AsRef<Path>) -> Result<VectorIndex> {
    read_index(BufReader::new(File::open(path)?), true)
}

/// Parses the index format. With `strict` set, embeddings must already be
/// unit-norm; otherwise they are normalized on load.
pub fn read_index<R: BufRead>(reader: R, strict: bool) -> Result<VectorIndex> {
    let mut lines = reader.lines().enumerate();
    let header_line = match lines.next() {
        Some((_, line)) => line?,
        None => {
            return Err(Error::Format {
                line: 1,
                message: "missing header".into(),
            })
        }
    };
    let header: Header = serde_json::from_str(&header_line).map_err(|e| Error::Format {
        line: 1,
        message: format!("bad header: {e}"),
    })?;
    if header.format != FORMAT_NAME {
        return Err(Error::Format {
            line: 1,
            message: format!("unknown format `{}`", header.format),
        });
    }
    if header.version != FORMAT_VERSION {
        return Err(Error::Format {
            line: 1,
            message: format!("unsupported version {} (expected {FORMAT_VERSION})", header.version),
        });
    }
    if header.dim == 0 {
        return Err(Error::Format {
            line: 1,
            message: "dimension must be positive".into(),
        });
    }

    let mut index = VectorIndex::empty(header.dim);
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| Error::Format { line: lineno, message };
        let record: IndexRecord =
            serde_json::from_str(&line).map_err(|e| fail(format!("corrupt record: {e}")))?;
        if record.embedding.dim() != header.dim {
            return Err(fail(format!(
                "embedding has dimension {}, header says {}",
                record.embedding.dim(),
                header.dim
            )));
        }
        if record.embedding.as_slice().iter().any(|x| !x.is_finite()) {
            return Err(fail("non-finite embedding component".into()));
        }
        if index.lookup.contains_key(&record.phrase) {
            return Err(fail(format!("duplicate phrase `{}`", record.phrase)));
        }
        let embedding = if record.embedding.is_unit() {
            record.embedding
        } else if strict {
            return Err(fail(format!("embedding of `{}` is not unit-norm", record.phrase)));
        } else {
            l2_normalize(&record.embedding).map_err(|e| fail(e.to_string()))?
        };
        index.push(record.phrase, embedding);
    }
    if index.len() != header.count {
        return Err(Error::Format {
            line: 1,
            message: format!("header count {} but {} records", header.count, index.len()),
        });
    }
    Ok(index)
}
