//! Recall@k of learned-keyword, random-keyword, dense and hybrid retrieval
//! over a corpus, driven by a trained model.

use std::collections::HashSet;
use std::fmt::Write as _;

use log::warn;
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::index::InvertedIndex;
use super::search::{recall_at_k, recall_dense, recall_hybrid, recall_sparse, UserQuery};
use crate::error::{Error, Result};
use crate::gating::GateSelection;
use crate::model::GateFormer;
use crate::scalar::Scalar;
use crate::text::{Impression, NewsMap, UserHistory};

/// Keywords of every history item, `β`-weighted and summed per token.
pub fn query_from_selections(selections: &[GateSelection]) -> UserQuery {
    UserQuery::from_weighted(
        selections
            .iter()
            .flat_map(|s| s.token_ids.iter().copied().zip(s.beta.iter().copied())),
    )
}

/// `k` distinct tokens per item drawn uniformly, each weighted `1/K_eff`.
pub fn random_query(history: &UserHistory, k: usize, seed: u64) -> UserQuery {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut terms = Vec::new();
    for seq in history.items() {
        let firsts = seq.first_occurrences();
        let n = k.min(firsts.len());
        for i in sample_indices(&mut rng, firsts.len(), n) {
            terms.push((seq.ids()[firsts[i]], 1.0 / n as f64));
        }
    }
    UserQuery::from_weighted(terms)
}

/// Which documents count as relevant for an impression.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relevance {
    /// The impression's clicked items.
    Clicked,
    /// The `r` documents closest to the user embedding.
    DenseTop(usize),
}

pub const RECALL_METHODS: [&str; 4] = ["sparse", "random", "dense", "hybrid"];

#[derive(Clone, Debug, PartialEq)]
pub struct RecallReport {
    pub ks: Vec<usize>,
    /// `[method][k]`, methods in [`RECALL_METHODS`] order.
    pub recall: [Vec<f64>; 4],
    pub impressions: usize,
}

impl RecallReport {
    pub fn get(&self, method: &str, k: usize) -> Option<f64> {
        let m = RECALL_METHODS.iter().position(|&x| x == method)?;
        let i = self.ks.iter().position(|&x| x == k)?;
        Some(self.recall[m][i])
    }

    pub fn to_csv(&self, fingerprint: &str) -> String {
        let mut s = format!("# config {fingerprint}\nmethod,k,recall\n");
        for (m, name) in RECALL_METHODS.iter().enumerate() {
            for (i, k) in self.ks.iter().enumerate() {
                let _ = writeln!(s, "{name},{k},{}", self.recall[m][i]);
            }
        }
        s
    }
}

/// Runs all four retrievers for every impression. `n_sparse` is the
/// hybrid candidate pool and must cover the largest `k`. Impressions with
/// no relevant document are skipped.
#[allow(clippy::too_many_arguments)]
pub fn recall_experiment<T: Scalar>(
    model: &GateFormer<T>,
    news: &NewsMap,
    index: &InvertedIndex,
    impressions: &[Impression],
    ks: &[usize],
    n_sparse: usize,
    relevance: Relevance,
    seed: u64,
) -> Result<RecallReport> {
    let k_max = ks.iter().copied().max().ok_or_else(|| Error::usage("no recall cut-offs given"))?;
    if k_max > n_sparse {
        return Err(Error::usage(format!("largest k ({k_max}) exceeds the hybrid pool ({n_sparse})")));
    }
    let doc_embs = (0..index.n_docs())
        .map(|d| {
            let key = index.doc_key(d);
            let seq = news
                .get(key)
                .ok_or_else(|| Error::Data(format!("indexed document `{key}` missing from news")))?;
            model.candidate_vector(seq)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sums: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; ks.len()]);
    let mut used = 0;
    let mut skipped = 0;
    for (i, imp) in impressions.iter().enumerate() {
        let salt = (1u64 << 48) + i as u64;
        let user = model.user_vector(&imp.history, salt)?;
        let relevant: HashSet<usize> = match relevance {
            Relevance::Clicked => imp
                .candidates
                .iter()
                .filter(|c| c.clicked)
                .filter_map(|c| index.doc_id(&c.item_id))
                .collect(),
            Relevance::DenseTop(r) => recall_dense(&user, &doc_embs, r)?.into_iter().collect(),
        };
        if relevant.is_empty() {
            skipped += 1;
            continue;
        }
        let learned = query_from_selections(&model.selections(&imp.history, salt)?).with_embedding(user.clone());
        let random = random_query(&imp.history, model.config.gate.k, seed ^ salt);
        let lists = [
            recall_sparse(index, &learned, k_max),
            recall_sparse(index, &random, k_max),
            recall_dense(&user, &doc_embs, k_max)?,
            recall_hybrid(index, &learned, &doc_embs, n_sparse, k_max)?,
        ];
        for (m, list) in lists.iter().enumerate() {
            for (j, &k) in ks.iter().enumerate() {
                sums[m][j] += recall_at_k(list, &relevant, k).expect("relevant set is non-empty");
            }
        }
        used += 1;
    }
    if skipped > 0 {
        warn!("recall: skipped {skipped} impressions without relevant documents");
    }
    if used > 0 {
        for row in &mut sums {
            row.iter_mut().for_each(|x| *x /= used as f64);
        }
    }
    Ok(RecallReport {
        ks: ks.to_vec(),
        recall: sums,
        impressions: used,
    })
}
