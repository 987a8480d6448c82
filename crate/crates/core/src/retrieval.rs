//! Corpus-level BM25 over chunks.
//!
//! All chunks of all documents are indexed jointly. Text analysis is
//! lowercasing, whitespace splitting and trimming of non-alphanumeric
//! characters from both ends of each token. IDF uses the non-negative form
//! `ln((N - df + 0.5) / (df + 0.5) + 1)`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunker::Chunk;

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;
pub const DEFAULT_TOP_K: usize = 4;

const MAGIC: &[u8; 8] = b"DFBM25\0\0";
const FORMAT_MAJOR: u16 = 1;
const FORMAT_MINOR: u16 = 0;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot index an empty corpus")]
    EmptyCorpus,
    #[error("invalid BM25 parameters: {0}")]
    InvalidParams(String),
    #[error("index I/O: {0}")]
    Io(#[from] io::Error),
    #[error("not a BM25 index file")]
    BadMagic,
    #[error("index format version {found} is newer than supported {supported}")]
    UnsupportedVersion { found: u16, supported: u16 },
    #[error("corrupt index: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params {
            k1: DEFAULT_K1,
            b: DEFAULT_B,
        }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if !(self.k1 > 0.0 && self.k1.is_finite()) {
            return Err(RetrievalError::InvalidParams(format!("k1 must be > 0, got {}", self.k1)));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(RetrievalError::InvalidParams(format!("b must be in [0, 1], got {}", self.b)));
        }
        Ok(())
    }
}

/// Lowercased tokens with leading/trailing punctuation removed.
pub fn analyze(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|tok| tok.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|tok| !tok.is_empty())
        .collect()
}

pub fn idf(n_docs: usize, df: usize) -> f64 {
    let n = n_docs as f64;
    let df = df as f64;
    ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub ordinal: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub chunk_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    pub hits: Vec<Hit>,
}

/// Anything that can rank chunk ids for a question.
pub trait Retriever: Sync {
    fn retrieve(&self, question: &str, k: usize) -> Vec<Hit>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bm25Index {
    postings: HashMap<String, Vec<Posting>>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    params: Bm25Params,
    chunk_ids: Vec<String>,
}

impl Bm25Index {
    pub fn build(chunks: &[Chunk], params: Bm25Params) -> Result<Self, RetrievalError> {
        params.validate()?;
        let mut postings: HashMap<String, Vec<Posting>> = HashMap::new();
        let mut doc_lengths = Vec::with_capacity(chunks.len());
        let mut chunk_ids = Vec::with_capacity(chunks.len());
        for (ordinal, chunk) in chunks.iter().enumerate() {
            let ordinal = u32::try_from(ordinal)
                .map_err(|_| RetrievalError::InvalidParams("too many chunks".into()))?;
            let terms = analyze(&chunk.text);
            doc_lengths.push(terms.len() as u32);
            chunk_ids.push(chunk.chunk_id.clone());
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in terms {
                *tf.entry(t).or_default() += 1;
            }
            for (term, tf) in tf {
                postings.entry(term).or_default().push(Posting { ordinal, tf });
            }
        }
        Self::from_parts(postings, doc_lengths, chunk_ids, params)
    }

    fn from_parts(
        postings: HashMap<String, Vec<Posting>>,
        doc_lengths: Vec<u32>,
        chunk_ids: Vec<String>,
        params: Bm25Params,
    ) -> Result<Self, RetrievalError> {
        let total: u64 = doc_lengths.iter().map(|&l| u64::from(l)).sum();
        if doc_lengths.is_empty() || total == 0 {
            return Err(RetrievalError::EmptyCorpus);
        }
        Ok(Bm25Index {
            avg_doc_length: total as f64 / doc_lengths.len() as f64,
            postings,
            doc_lengths,
            params,
            chunk_ids,
        })
    }

    pub fn n_docs(&self) -> usize {
        self.doc_lengths.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn chunk_ids(&self) -> &[String] {
        &self.chunk_ids
    }

    pub fn doc_length(&self, ordinal: usize) -> u32 {
        self.doc_lengths[ordinal]
    }

    pub fn df(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map_or(&[], Vec::as_slice)
    }

    pub fn idf(&self, term: &str) -> f64 {
        idf(self.n_docs(), self.df(term))
    }

    /// BM25 scores of every chunk with a positive score, keyed by ordinal.
    pub fn scores(&self, question: &str) -> HashMap<u32, f64> {
        let Bm25Params { k1, b } = self.params;
        let mut scores: HashMap<u32, f64> = HashMap::new();
        for term in analyze(question) {
            let Some(list) = self.postings.get(&term) else {
                continue;
            };
            let idf = idf(self.n_docs(), list.len());
            for p in list {
                let tf = f64::from(p.tf);
                let len = f64::from(self.doc_lengths[p.ordinal as usize]);
                let norm = 1.0 - b + b * len / self.avg_doc_length;
                *scores.entry(p.ordinal).or_insert(0.0) += idf * tf * (k1 + 1.0) / (tf + k1 * norm);
            }
        }
        scores
    }

    pub fn query(&self, query_id: &str, question: &str, k: usize) -> RetrievalResult {
        RetrievalResult {
            query_id: query_id.to_string(),
            hits: self.retrieve(question, k),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), RetrievalError> {
        w.write_all(MAGIC)?;
        w.write_u16::<LittleEndian>(FORMAT_MAJOR)?;
        w.write_u16::<LittleEndian>(FORMAT_MINOR)?;
        w.write_f64::<LittleEndian>(self.params.k1)?;
        w.write_f64::<LittleEndian>(self.params.b)?;
        w.write_u32::<LittleEndian>(self.n_docs() as u32)?;
        for (id, len) in self.chunk_ids.iter().zip(&self.doc_lengths) {
            write_str(&mut w, id)?;
            w.write_u32::<LittleEndian>(*len)?;
        }
        let terms: BTreeMap<&String, &Vec<Posting>> = self.postings.iter().collect();
        w.write_u32::<LittleEndian>(terms.len() as u32)?;
        for (term, list) in terms {
            write_str(&mut w, term)?;
            w.write_u32::<LittleEndian>(list.len() as u32)?;
            for p in list {
                w.write_u32::<LittleEndian>(p.ordinal)?;
                w.write_u32::<LittleEndian>(p.tf)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, RetrievalError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(RetrievalError::BadMagic);
        }
        let major = r.read_u16::<LittleEndian>()?;
        let _minor = r.read_u16::<LittleEndian>()?;
        if major > FORMAT_MAJOR {
            return Err(RetrievalError::UnsupportedVersion {
                found: major,
                supported: FORMAT_MAJOR,
            });
        }
        let params = Bm25Params {
            k1: r.read_f64::<LittleEndian>()?,
            b: r.read_f64::<LittleEndian>()?,
        };
        params.validate()?;
        let n_docs = r.read_u32::<LittleEndian>()? as usize;
        let mut chunk_ids = Vec::with_capacity(n_docs.min(1 << 20));
        let mut doc_lengths = Vec::with_capacity(n_docs.min(1 << 20));
        for _ in 0..n_docs {
            chunk_ids.push(read_str(&mut r)?);
            doc_lengths.push(r.read_u32::<LittleEndian>()?);
        }
        let n_terms = r.read_u32::<LittleEndian>()? as usize;
        let mut postings = HashMap::with_capacity(n_terms.min(1 << 20));
        for _ in 0..n_terms {
            let term = read_str(&mut r)?;
            let n = r.read_u32::<LittleEndian>()? as usize;
            let mut list = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                let ordinal = r.read_u32::<LittleEndian>()?;
                if ordinal as usize >= n_docs {
                    return Err(RetrievalError::Corrupt(format!(
                        "posting for `{term}` points past the last chunk"
                    )));
                }
                list.push(Posting {
                    ordinal,
                    tf: r.read_u32::<LittleEndian>()?,
                });
            }
            postings.insert(term, list);
        }
        Self::from_parts(postings, doc_lengths, chunk_ids, params)
    }
}

impl Retriever for Bm25Index {
    fn retrieve(&self, question: &str, k: usize) -> Vec<Hit> {
        let mut hits: Vec<Hit> = self
            .scores(question)
            .into_iter()
            .filter(|(_, s)| *s > 0.0)
            .map(|(ord, score)| Hit {
                chunk_id: self.chunk_ids[ord as usize].clone(),
                score,
            })
            .collect();
        hits.sort_by(rank_order);
        hits.truncate(k);
        hits
    }
}

/// Descending score, ties broken by ascending chunk id.
pub fn rank_order(a: &Hit, b: &Hit) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.chunk_id.cmp(&b.chunk_id))
}

fn write_str<W: Write>(w: &mut W, s: &str) -> io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str<R: Read>(r: &mut R) -> Result<String, RetrievalError> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = Vec::with_capacity(len.min(1 << 20));
    r.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(RetrievalError::Corrupt("truncated string".into()));
    }
    String::from_utf8(buf).map_err(|e| RetrievalError::Corrupt(e.to_string()))
}
