//! MIND-format readers.
//!
//! `news.tsv`: `news_id, category, subcategory, title, abstract, url,
//! title_entities, abstract_entities`.
//! `behaviors.tsv`: `impression_id, user_id, time, history, impressions`
//! where `history` is space-separated news ids and `impressions` is
//! space-separated `Nxxx-label` pairs.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use log::warn;
use rand::seq::index::sample as sample_indices;
use rand::Rng;

use crate::error::{Error, Result};
use crate::text::{wordpiece_tokenize, ImpressionSample, TokenSequence, UserHistory, Vocabulary};

pub type NewsMap = BTreeMap<String, TokenSequence>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NewsFields {
    #[default]
    TitleAbstract,
    TitleOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub rows: usize,
    pub skipped: usize,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

pub fn parse_news<R: BufRead>(
    reader: R,
    vocab: &Vocabulary,
    max_tokens: usize,
    fields: NewsFields,
) -> Result<(NewsMap, LoadStats)> {
    let mut news = NewsMap::new();
    let mut stats = LoadStats::default();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        stats.rows += 1;
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 4 || cols[0].is_empty() {
            warn!("news row {}: expected at least 4 columns, got {}", lineno + 1, cols.len());
            stats.skipped += 1;
            continue;
        }
        let title = cols[3];
        let abstract_ = cols.get(4).copied().unwrap_or("");
        let text = match fields {
            NewsFields::TitleAbstract if !abstract_.is_empty() => format!("{title} {abstract_}"),
            _ => title.to_string(),
        };
        let mut seq = wordpiece_tokenize(&text, vocab);
        seq.truncate(max_tokens);
        news.insert(cols[0].to_string(), seq);
    }
    Ok((news, stats))
}

/// Loads and tokenizes a news file, truncating each item to `max_tokens`.
pub fn load_mind_news(
    path: &Path,
    vocab: &Vocabulary,
    max_tokens: usize,
    fields: NewsFields,
) -> Result<(NewsMap, LoadStats)> {
    parse_news(open(path)?, vocab, max_tokens, fields)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub item_id: String,
    pub tokens: TokenSequence,
    pub clicked: bool,
}

/// One logged impression with its resolved history.
#[derive(Clone, Debug, PartialEq)]
pub struct Impression {
    pub impression_id: String,
    pub user_id: String,
    pub history: UserHistory,
    pub history_ids: Vec<String>,
    pub candidates: Vec<Candidate>,
}

impl Impression {
    pub fn has_both_labels(&self) -> bool {
        self.candidates.iter().any(|c| c.clicked) && self.candidates.iter().any(|c| !c.clicked)
    }
}

/// Parses behaviors rows. Unknown news ids are dropped; rows whose
/// resolved history is empty are skipped.
pub fn parse_behaviors<R: BufRead>(reader: R, news: &NewsMap, max_history: usize) -> Result<(Vec<Impression>, LoadStats)> {
    let mut out = Vec::new();
    let mut stats = LoadStats::default();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        stats.rows += 1;
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            warn!("behaviors row {}: expected 5 columns, got {}", lineno + 1, cols.len());
            stats.skipped += 1;
            continue;
        }
        let mut candidates = Vec::new();
        let mut malformed = false;
        for pair in cols[4].split_whitespace() {
            let Some((id, label)) = pair.rsplit_once('-') else {
                malformed = true;
                break;
            };
            let clicked = match label {
                "1" => true,
                "0" => false,
                _ => {
                    malformed = true;
                    break;
                }
            };
            if let Some(tokens) = news.get(id).filter(|t| !t.is_empty()) {
                candidates.push(Candidate {
                    item_id: id.to_string(),
                    tokens: tokens.clone(),
                    clicked,
                });
            }
        }
        if malformed {
            warn!("behaviors row {}: malformed impression list", lineno + 1);
            stats.skipped += 1;
            continue;
        }
        let mut history_ids: Vec<String> = cols[3]
            .split_whitespace()
            .filter(|id| news.get(*id).is_some_and(|t| !t.is_empty()))
            .map(str::to_string)
            .collect();
        if history_ids.len() > max_history {
            history_ids.drain(..history_ids.len() - max_history);
        }
        let items = history_ids.iter().map(|id| news[id].clone()).collect();
        let Ok(history) = UserHistory::new(items, max_history) else {
            stats.skipped += 1;
            continue;
        };
        if candidates.is_empty() {
            stats.skipped += 1;
            continue;
        }
        out.push(Impression {
            impression_id: cols[0].to_string(),
            user_id: cols[1].to_string(),
            history,
            history_ids,
            candidates,
        });
    }
    Ok((out, stats))
}

pub fn load_mind_impressions(path: &Path, news: &NewsMap, max_history: usize) -> Result<(Vec<Impression>, LoadStats)> {
    parse_behaviors(open(path)?, news, max_history)
}

/// Emits one sample per clicked item with `k_neg` negatives drawn
/// uniformly without replacement from the impression's non-clicked items,
/// or with replacement when fewer than `k_neg` are available.
pub fn sample_negatives<R: Rng>(impressions: &[Impression], k_neg: usize, rng: &mut R) -> Vec<ImpressionSample> {
    let mut out = Vec::new();
    for imp in impressions {
        for pos in imp.candidates.iter().filter(|c| c.clicked) {
            let pool: Vec<&Candidate> = imp
                .candidates
                .iter()
                .filter(|c| !c.clicked && c.item_id != pos.item_id)
                .collect();
            if pool.is_empty() || k_neg == 0 {
                continue;
            }
            let negatives = if pool.len() >= k_neg {
                sample_indices(rng, pool.len(), k_neg)
                    .into_iter()
                    .map(|i| pool[i].tokens.clone())
                    .collect()
            } else {
                (0..k_neg)
                    .map(|_| pool[rng.gen_range(0..pool.len())].tokens.clone())
                    .collect()
            };
            out.push(ImpressionSample {
                user_id: imp.user_id.clone(),
                history: imp.history.clone(),
                positive: pos.tokens.clone(),
                negatives,
            });
        }
    }
    out
}

pub fn load_mind_behaviors<R: Rng>(
    path: &Path,
    news: &NewsMap,
    max_history: usize,
    k_neg: usize,
    rng: &mut R,
) -> Result<Vec<ImpressionSample>> {
    let (impressions, _) = load_mind_impressions(path, news, max_history)?;
    Ok(sample_negatives(&impressions, k_neg, rng))
}

#[cfg(test)]
mod tests {
    use std::io::Cursor;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens(["[PAD]", "[UNK]", "stocks", "rally", "team", "wins", "rain", "today", "again"]).unwrap()
    }

    const NEWS: &str = "N1\tfinance\tmarkets\tStocks rally\tStocks rally again today\t\t[]\t[]\n\
                        N2\tsports\tnfl\tTeam wins\t\t\t[]\t[]\n\
                        N3\tweather\tlocal\tRain today\tRain again\t\t[]\t[]\n";

    #[test]
    fn fixture_news_parses_to_expected_ids() {
        let v = vocab();
        let (news, stats) = parse_news(Cursor::new(NEWS), &v, 30, NewsFields::TitleAbstract).unwrap();
        assert_eq!(stats, LoadStats { rows: 3, skipped: 0 });
        assert_eq!(news.len(), 3);
        let ids = |ws: &[&str]| ws.iter().map(|w| v.get(w).unwrap()).collect::<Vec<_>>();
        assert_eq!(news["N1"].ids(), ids(&["stocks", "rally", "stocks", "rally", "again", "today"]).as_slice());
        // empty abstract: title alone
        assert_eq!(news["N2"].ids(), ids(&["team", "wins"]).as_slice());
        assert_eq!(news["N3"].ids(), ids(&["rain", "today", "rain", "again"]).as_slice());
    }

    #[test]
    fn truncation_and_title_only() {
        let v = vocab();
        let (news, _) = parse_news(Cursor::new(NEWS), &v, 2, NewsFields::TitleAbstract).unwrap();
        assert!(news.values().all(|s| s.len() == 2));
        let (news, _) = parse_news(Cursor::new(NEWS), &v, 30, NewsFields::TitleOnly).unwrap();
        assert_eq!(news["N1"].len(), 2);
    }

    #[test]
    fn malformed_news_rows_are_counted() {
        let v = vocab();
        let text = "N1\tx\n\tcat\tsub\ttitle\nN2\tsports\tnfl\tTeam wins\n";
        let (news, stats) = parse_news(Cursor::new(text), &v, 30, NewsFields::TitleAbstract).unwrap();
        assert_eq!(news.len(), 1);
        assert_eq!(stats.skipped, 2);
    }

    #[test]
    fn missing_news_file_is_an_error() {
        let v = vocab();
        let err = load_mind_news(Path::new("/nonexistent/news.tsv"), &v, 30, NewsFields::TitleAbstract);
        assert!(matches!(err, Err(Error::Io { .. })));
    }

    fn news_map() -> NewsMap {
        let mut m = NewsMap::new();
        for i in 1..=8 {
            m.insert(format!("N{i}"), TokenSequence::from_ids(vec![i + 1]));
        }
        m
    }

    #[test]
    fn negatives_are_a_permutation_when_exactly_k_available() {
        let rows = "1\tU1\tt\tN1 N2\tN3-1 N4-0 N5-0 N6-0 N7-0\n";
        let (imps, _) = parse_behaviors(Cursor::new(rows), &news_map(), 50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let samples = sample_negatives(&imps, 4, &mut rng);
        assert_eq!(samples.len(), 1);
        let mut got: Vec<usize> = samples[0].negatives.iter().map(|s| s.ids()[0]).collect();
        got.sort();
        assert_eq!(got, vec![5, 6, 7, 8]);
    }

    #[test]
    fn empty_history_contributes_nothing() {
        let rows = "1\tU1\tt\t\tN3-1 N4-0\n2\tU2\tt\tN99\tN3-1 N4-0\n";
        let (imps, stats) = parse_behaviors(Cursor::new(rows), &news_map(), 50).unwrap();
        assert!(imps.is_empty());
        assert_eq!(stats.skipped, 2);
    }

    #[test]
    fn fixture_two_users_hand_enumerated() {
        // U1: two clicks, three non-clicks; U2: one click, one non-click
        // (resampled with replacement), unknown N99 ignored.
        let rows = "1\tU1\tt\tN1 N2 N3\tN4-1 N5-0 N6-1 N7-0 N8-0\n\
                    2\tU2\tt\tN2\tN1-1 N99-0 N3-0\n";
        let (imps, _) = parse_behaviors(Cursor::new(rows), &news_map(), 2).unwrap();
        assert_eq!(imps.len(), 2);
        // history truncated to most recent 2
        assert_eq!(imps[0].history_ids, vec!["N2", "N3"]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples = sample_negatives(&imps, 2, &mut rng);
        let summary: Vec<(String, usize, Vec<usize>)> = samples
            .iter()
            .map(|s| {
                let mut n: Vec<usize> = s.negatives.iter().map(|t| t.ids()[0]).collect();
                n.sort();
                (s.user_id.clone(), s.positive.ids()[0], n)
            })
            .collect();
        assert_eq!(summary.len(), 3);
        assert_eq!(summary[0].0, "U1");
        assert_eq!(summary[0].1, 5);
        assert_eq!(summary[1].1, 7);
        for s in &summary[..2] {
            assert_eq!(s.2.len(), 2);
            assert!(s.2.iter().all(|id| [6, 8, 9].contains(id)));
            assert_ne!(s.2[0], s.2[1]);
        }
        assert_eq!(summary[2], ("U2".to_string(), 2, vec![4, 4]));
    }

    #[test]
    fn negative_sampling_is_reproducible() {
        let rows = "1\tU1\tt\tN1\tN2-1 N3-0 N4-0 N5-0 N6-0 N7-0 N8-0\n";
        let (imps, _) = parse_behaviors(Cursor::new(rows), &news_map(), 50).unwrap();
        let a = sample_negatives(&imps, 4, &mut ChaCha8Rng::seed_from_u64(3));
        let b = sample_negatives(&imps, 4, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }
}
