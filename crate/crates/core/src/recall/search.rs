use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};

use super::index::InvertedIndex;
use crate::error::{Error, Result};

/// Weighted keyword query, optionally paired with a dense user vector.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UserQuery {
    keywords: Vec<(usize, f64)>,
    pub user_embedding: Option<Vec<f64>>,
}

impl UserQuery {
    /// Sums weights per token; non-positive and non-finite totals are dropped.
    pub fn from_weighted<I: IntoIterator<Item = (usize, f64)>>(terms: I) -> Self {
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        for (t, w) in terms {
            *acc.entry(t).or_default() += w;
        }
        Self {
            keywords: acc.into_iter().filter(|&(_, w)| w > 0.0 && w.is_finite()).collect(),
            user_embedding: None,
        }
    }

    pub fn with_embedding(mut self, e: Vec<f64>) -> Self {
        self.user_embedding = Some(e);
        self
    }

    /// Sorted by token id.
    pub fn keywords(&self) -> &[(usize, f64)] {
        &self.keywords
    }

    pub fn is_empty(&self) -> bool {
        self.keywords.is_empty()
    }
}

pub fn bm25_score(idx: &InvertedIndex, query: &UserQuery, doc: usize) -> f64 {
    let len = idx.doc_len(doc);
    query
        .keywords
        .iter()
        .map(|&(t, w)| match idx.tf(t, doc) {
            0 => 0.0,
            tf => w * idx.term_weight(t, tf, len),
        })
        .sum()
}

fn by_score_then_id(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
}

fn top_n(mut scored: Vec<(usize, f64)>, n: usize) -> Vec<(usize, f64)> {
    if scored.len() > n {
        scored.select_nth_unstable_by(n, by_score_then_id);
        scored.truncate(n);
    }
    scored.sort_by(by_score_then_id);
    scored
}

/// Exact BM25 ranking over the union of the query terms' postings.
pub fn recall_sparse_scored(idx: &InvertedIndex, query: &UserQuery, n: usize) -> Vec<(usize, f64)> {
    let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
    for &(t, w) in &query.keywords {
        let idf = idx.idf(t);
        for p in idx.postings(t) {
            let doc = p.doc as usize;
            let s = super::index::bm25_term(f64::from(p.tf), idf, idx.doc_len(doc) as f64, idx.avg_len());
            *acc.entry(doc).or_default() += w * s;
        }
    }
    top_n(acc.into_iter().collect(), n)
}

pub fn recall_sparse(idx: &InvertedIndex, query: &UserQuery, n: usize) -> Vec<usize> {
    recall_sparse_scored(idx, query, n).into_iter().map(|(d, _)| d).collect()
}

/// Scaled inner product `<u, c> / sqrt(d)`.
pub fn dense_score(u: &[f64], c: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), c.len());
    u.iter().zip(c).map(|(a, b)| a * b).sum::<f64>() / (u.len() as f64).sqrt()
}

/// `doc_embs[i]` is the embedding of doc `i`.
pub fn recall_dense(user: &[f64], doc_embs: &[Vec<f64>], n: usize) -> Result<Vec<usize>> {
    if let Some(bad) = doc_embs.iter().find(|e| e.len() != user.len()) {
        return Err(Error::Shape {
            op: "recall_dense",
            lhs: vec![user.len()],
            rhs: vec![bad.len()],
        });
    }
    let scored = doc_embs.iter().enumerate().map(|(i, e)| (i, dense_score(user, e))).collect();
    Ok(top_n(scored, n).into_iter().map(|(d, _)| d).collect())
}

/// Sparse top-`n_sparse`, re-ranked by dense score.
pub fn recall_hybrid(
    idx: &InvertedIndex,
    query: &UserQuery,
    doc_embs: &[Vec<f64>],
    n_sparse: usize,
    n: usize,
) -> Result<Vec<usize>> {
    if n > n_sparse {
        return Err(Error::usage(format!("hybrid recall needs n ({n}) <= n_sparse ({n_sparse})")));
    }
    let user = query
        .user_embedding
        .as_deref()
        .ok_or_else(|| Error::usage("hybrid recall needs a user embedding"))?;
    let mut scored = Vec::new();
    for d in recall_sparse(idx, query, n_sparse) {
        let e = &doc_embs[d];
        if e.len() != user.len() {
            return Err(Error::Shape {
                op: "recall_hybrid",
                lhs: vec![user.len()],
                rhs: vec![e.len()],
            });
        }
        scored.push((d, dense_score(user, e)));
    }
    Ok(top_n(scored, n).into_iter().map(|(d, _)| d).collect())
}

/// `None` when `relevant` is empty.
pub fn recall_at_k(results: &[usize], relevant: &HashSet<usize>, k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let hit = results.iter().take(k).filter(|d| relevant.contains(d)).count();
    Some(hit as f64 / relevant.len() as f64)
}
