//! Keyword (inverted index), embedding and hybrid candidate recall.

mod experiment;
mod index;
mod search;

pub use experiment::{
    query_from_selections, random_query, recall_experiment, RecallReport, Relevance, RECALL_METHODS,
};
pub use index::{bm25_idf, bm25_term, InvertedIndex, Posting, BM25_B, BM25_K1};
pub use search::{
    bm25_score, dense_score, recall_at_k, recall_dense, recall_hybrid, recall_sparse, recall_sparse_scored, UserQuery,
};

use crate::error::Result;
use crate::text::NewsMap;

/// Indexes a news map in key order.
pub fn build_index(docs: &NewsMap) -> Result<InvertedIndex> {
    InvertedIndex::build(docs.iter().map(|(k, v)| (k.as_str(), v)))
}
