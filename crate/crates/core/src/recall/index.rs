//! Inverted index with Okapi BM25 statistics.
//!
//! Persisted layout (all integers little-endian):
//!
//! ```text
//! magic      b"GFIX"
//! version    u32 = 1
//! n_docs     u32
//! avg_len    f64
//! n_terms    u32
//! n_terms × postings block:
//!     token  u32
//!     count  u32
//!     count × doc delta u32   (first delta is the doc id itself)
//!     count × tf u32
//! n_docs × doc length u32
//! n_docs × doc key: len u32, UTF-8 bytes
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::text::TokenSequence;

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

const MAGIC: &[u8; 4] = b"GFIX";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvertedIndex {
    postings: BTreeMap<u32, Vec<Posting>>,
    doc_lengths: Vec<u32>,
    doc_keys: Vec<String>,
    avg_len: f64,
}

/// BM25 inverse document frequency, `ln((N - df + 0.5)/(df + 0.5) + 1)`.
#[inline]
pub fn bm25_idf(df: usize, n_docs: usize) -> f64 {
    ((n_docs as f64 - df as f64 + 0.5) / (df as f64 + 0.5) + 1.0).ln()
}

/// Saturated, length-normalized term frequency times IDF.
#[inline]
pub fn bm25_term(tf: f64, idf: f64, doc_len: f64, avg_len: f64) -> f64 {
    let norm = 1.0 - BM25_B + BM25_B * doc_len / avg_len;
    idf * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * norm)
}

impl InvertedIndex {
    /// Indexes documents in the given order; document `i` gets id `i`.
    pub fn build<'a, I>(docs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a TokenSequence)>,
    {
        let mut postings: BTreeMap<u32, Vec<Posting>> = BTreeMap::new();
        let mut doc_lengths = Vec::new();
        let mut doc_keys = Vec::new();
        for (doc, (key, seq)) in docs.into_iter().enumerate() {
            let doc = u32::try_from(doc).map_err(|_| Error::usage("too many documents"))?;
            let mut counts: BTreeMap<u32, u32> = BTreeMap::new();
            for &id in seq.ids() {
                *counts.entry(id as u32).or_default() += 1;
            }
            for (token, tf) in counts {
                postings.entry(token).or_default().push(Posting { doc, tf });
            }
            doc_lengths.push(seq.len() as u32);
            doc_keys.push(key.to_string());
        }
        if doc_keys.is_empty() {
            return Err(Error::usage("cannot index an empty corpus"));
        }
        let total: u64 = doc_lengths.iter().map(|&l| u64::from(l)).sum();
        let avg_len = (total as f64 / doc_keys.len() as f64).max(f64::MIN_POSITIVE);
        Ok(Self {
            postings,
            doc_lengths,
            doc_keys,
            avg_len,
        })
    }

    pub fn n_docs(&self) -> usize {
        self.doc_keys.len()
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn doc_len(&self, doc: usize) -> usize {
        self.doc_lengths[doc] as usize
    }

    pub fn doc_key(&self, doc: usize) -> &str {
        &self.doc_keys[doc]
    }

    pub fn doc_id(&self, key: &str) -> Option<usize> {
        self.doc_keys.iter().position(|k| k == key)
    }

    pub fn postings(&self, token: usize) -> &[Posting] {
        self.postings.get(&(token as u32)).map_or(&[], Vec::as_slice)
    }

    pub fn terms(&self) -> impl Iterator<Item = (usize, &[Posting])> {
        self.postings.iter().map(|(&t, p)| (t as usize, p.as_slice()))
    }

    pub fn df(&self, token: usize) -> usize {
        self.postings(token).len()
    }

    pub fn tf(&self, token: usize, doc: usize) -> usize {
        let p = self.postings(token);
        p.binary_search_by_key(&(doc as u32), |x| x.doc)
            .map_or(0, |i| p[i].tf as usize)
    }

    pub fn idf(&self, token: usize) -> f64 {
        bm25_idf(self.df(token), self.n_docs())
    }

    /// BM25 weight of `token` occurring `tf` times in a text of `len`
    /// tokens, using this corpus's statistics.
    pub fn term_weight(&self, token: usize, tf: usize, len: usize) -> f64 {
        bm25_term(tf as f64, self.idf(token), len as f64, self.avg_len)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let u32le = |out: &mut Vec<u8>, v: u32| out.extend_from_slice(&v.to_le_bytes());
        out.extend_from_slice(MAGIC);
        u32le(&mut out, VERSION);
        u32le(&mut out, self.n_docs() as u32);
        out.extend_from_slice(&self.avg_len.to_le_bytes());
        u32le(&mut out, self.postings.len() as u32);
        for (&token, list) in &self.postings {
            u32le(&mut out, token);
            u32le(&mut out, list.len() as u32);
            let mut prev = 0;
            for p in list {
                u32le(&mut out, p.doc - prev);
                prev = p.doc;
            }
            for p in list {
                u32le(&mut out, p.tf);
            }
        }
        for &l in &self.doc_lengths {
            u32le(&mut out, l);
        }
        for k in &self.doc_keys {
            u32le(&mut out, k.len() as u32);
            out.extend_from_slice(k.as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Data("not an index file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Data(format!("unsupported index version {version}")));
        }
        let n_docs = r.u32()? as usize;
        let avg_len = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let n_terms = r.u32()? as usize;
        let mut postings = BTreeMap::new();
        for _ in 0..n_terms {
            let token = r.u32()?;
            let count = r.u32()? as usize;
            let mut docs = Vec::with_capacity(count);
            let mut prev = 0u32;
            for _ in 0..count {
                prev = prev
                    .checked_add(r.u32()?)
                    .ok_or_else(|| Error::Data("doc id overflow".into()))?;
                docs.push(prev);
            }
            let mut list = Vec::with_capacity(count);
            for doc in docs {
                list.push(Posting { doc, tf: r.u32()? });
            }
            postings.insert(token, list);
        }
        let doc_lengths = (0..n_docs).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let mut doc_keys = Vec::with_capacity(n_docs);
        for _ in 0..n_docs {
            let len = r.u32()? as usize;
            let s = std::str::from_utf8(r.take(len)?).map_err(|e| Error::Data(e.to_string()))?;
            doc_keys.push(s.to_string());
        }
        if r.pos != bytes.len() {
            return Err(Error::Data("trailing bytes in index file".into()));
        }
        Ok(Self {
            postings,
            doc_lengths,
            doc_keys,
            avg_len,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Data("truncated index file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
