//! Ranking metrics over one impression's scores and binary labels.
//!
//! Ranking order is descending score with ties broken by the smaller
//! index.

/// Indices sorted by descending score, ties by index.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// P(score_pos > score_neg) over all positive/negative pairs, ties ½.
/// Computed from average ranks (Mann-Whitney U). NaN when either class is
/// absent.
pub fn auc(scores: &[f64], labels: &[bool]) -> f64 {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return f64::NAN;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    u / (n_pos * n_neg) as f64
}

/// Reciprocal rank of the first positive; 0 when there is none.
pub fn mrr(scores: &[f64], labels: &[bool]) -> f64 {
    ranking(scores)
        .iter()
        .position(|&i| labels[i])
        .map_or(0.0, |r| 1.0 / (r + 1) as f64)
}

/// NDCG@k with binary gains.
pub fn ndcg(scores: &[f64], labels: &[bool], k: usize) -> f64 {
    let discount = |r: usize| 1.0 / (r as f64 + 2.0).log2();
    let dcg: f64 = ranking(scores)
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, &i)| labels[i])
        .map(|(r, _)| discount(r))
        .sum();
    let n_pos = labels.iter().filter(|&&l| l).count();
    let idcg: f64 = (0..n_pos.min(k)).map(discount).sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

/// Per-impression metrics averaged over impressions.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub auc: f64,
    pub mrr: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub impressions: usize,
}

impl EvalReport {
    /// Averages over impressions that have both a positive and a negative.
    pub fn from_impressions<'a, I>(items: I) -> Self
    where
        I: IntoIterator<Item = (&'a [f64], &'a [bool])>,
    {
        let mut r = EvalReport::default();
        for (s, l) in items {
            let a = auc(s, l);
            if a.is_nan() {
                continue;
            }
            r.auc += a;
            r.mrr += mrr(s, l);
            r.ndcg5 += ndcg(s, l, 5);
            r.ndcg10 += ndcg(s, l, 10);
            r.impressions += 1;
        }
        if r.impressions > 0 {
            let n = r.impressions as f64;
            r.auc /= n;
            r.mrr /= n;
            r.ndcg5 /= n;
            r.ndcg10 /= n;
        }
        r
    }
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "AUC {:.4}  MRR {:.4}  NDCG@5 {:.4}  NDCG@10 {:.4}  ({} impressions)",
            self.auc, self.mrr, self.ndcg5, self.ndcg10, self.impressions
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positive_first_of_five() {
        let s = [0.9, 0.1, 0.2, 0.3, 0.4];
        let l = [true, false, false, false, false];
        assert_eq!(auc(&s, &l), 1.0);
        assert_eq!(mrr(&s, &l), 1.0);
        assert_eq!(ndcg(&s, &l, 5), 1.0);
    }

    #[test]
    fn positive_last_of_two() {
        let s = [0.1, 0.9];
        let l = [true, false];
        assert_eq!(auc(&s, &l), 0.0);
        assert_eq!(mrr(&s, &l), 0.5);
    }

    #[test]
    fn ties_count_half() {
        assert_eq!(auc(&[0.5, 0.5], &[true, false]), 0.5);
        assert!(auc(&[0.5], &[true]).is_nan());
    }
}
