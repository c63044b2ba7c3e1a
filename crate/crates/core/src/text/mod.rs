//! Tokenization, vocabulary and corpus ingestion.

mod mind;
mod synth;
mod vocab;
mod wordpiece;

pub use mind::{
    load_mind_behaviors, load_mind_impressions, load_mind_news, parse_behaviors, parse_news,
    sample_negatives, Candidate, Impression, LoadStats, NewsFields, NewsMap,
};
pub use synth::{synth_corpus, SignalPolicy, SynthConfig, SynthCorpus, SynthImpression, SynthItem, SynthUser};
pub use vocab::{Vocabulary, PAD_ID, PAD_TOKEN, UNK_TOKEN};
pub use wordpiece::wordpiece_tokenize;

use crate::error::{Error, Result};

/// Default item length cap.
pub const DEFAULT_MAX_TOKENS: usize = 30;
/// Default history length cap.
pub const DEFAULT_MAX_HISTORY: usize = 50;

/// Tokenized item text. `word_group[j]` identifies the surface word token
/// `j` came from; `source_positions[j]` is its character offset.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
    word_group: Vec<usize>,
    source_positions: Vec<usize>,
}

impl TokenSequence {
    /// Builds a sequence in which every token is its own word.
    pub fn from_ids(ids: Vec<usize>) -> Self {
        let n = ids.len();
        Self {
            ids,
            word_group: (0..n).collect(),
            source_positions: (0..n).collect(),
        }
    }

    pub fn new(ids: Vec<usize>, word_group: Vec<usize>, source_positions: Vec<usize>) -> Result<Self> {
        if ids.len() != word_group.len() || ids.len() != source_positions.len() {
            return Err(Error::Data("token sequence fields differ in length".into()));
        }
        if word_group.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Data("word groups must be non-decreasing".into()));
        }
        Ok(Self {
            ids,
            word_group,
            source_positions,
        })
    }

    pub(crate) fn push(&mut self, id: usize, group: usize, position: usize) {
        self.ids.push(id);
        self.word_group.push(group);
        self.source_positions.push(position);
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn word_groups(&self) -> &[usize] {
        &self.word_group
    }

    pub fn source_positions(&self) -> &[usize] {
        &self.source_positions
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn truncate(&mut self, max_len: usize) {
        self.ids.truncate(max_len);
        self.word_group.truncate(max_len);
        self.source_positions.truncate(max_len);
    }

    /// Positions holding the first occurrence of each distinct non-pad id.
    pub fn first_occurrences(&self) -> Vec<usize> {
        let mut seen = std::collections::HashSet::new();
        self.ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| id != PAD_ID && seen.insert(id))
            .map(|(j, _)| j)
            .collect()
    }
}

/// Chronological clicked items, most recent last.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserHistory {
    items: Vec<TokenSequence>,
}

impl UserHistory {
    /// Keeps the most recent `max_items` non-empty items. Fails when no
    /// item remains.
    pub fn new(items: Vec<TokenSequence>, max_items: usize) -> Result<Self> {
        let mut items: Vec<TokenSequence> = items.into_iter().filter(|s| !s.is_empty()).collect();
        if items.len() > max_items {
            items.drain(..items.len() - max_items);
        }
        if items.is_empty() {
            return Err(Error::usage("user history is empty"));
        }
        Ok(Self { items })
    }

    pub fn items(&self) -> &[TokenSequence] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn total_tokens(&self) -> usize {
        self.items.iter().map(TokenSequence::len).sum()
    }
}

/// One training example: a history, one clicked item and sampled
/// non-clicked items from the same impression.
#[derive(Clone, Debug, PartialEq)]
pub struct ImpressionSample {
    pub user_id: String,
    pub history: UserHistory,
    pub positive: TokenSequence,
    pub negatives: Vec<TokenSequence>,
}
