//! Greedy longest-match-first WordPiece tokenization.

use crate::text::{TokenSequence, Vocabulary};

/// Words longer than this many characters map to `[UNK]`.
const MAX_WORD_CHARS: usize = 100;

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace() && !c.is_control())
}

/// Splits text into lowercased surface words with their starting
/// character offsets. Each punctuation character is its own word.
fn surface_words(text: &str) -> Vec<(usize, String)> {
    let mut words = Vec::new();
    let mut current = String::new();
    let mut start = 0;
    for (pos, c) in text.chars().enumerate() {
        if c.is_whitespace() || c.is_control() {
            if !current.is_empty() {
                words.push((start, std::mem::take(&mut current)));
            }
        } else if is_punctuation(c) {
            if !current.is_empty() {
                words.push((start, std::mem::take(&mut current)));
            }
            words.push((pos, c.to_lowercase().collect()));
        } else {
            if current.is_empty() {
                start = pos;
            }
            current.extend(c.to_lowercase());
        }
    }
    if !current.is_empty() {
        words.push((start, current));
    }
    words
}

/// Splits one word into vocabulary pieces, or `None` if some suffix cannot
/// be matched. Offsets are character offsets within the word.
fn split_word(word: &str, vocab: &Vocabulary) -> Option<Vec<(usize, usize)>> {
    let chars: Vec<char> = word.chars().collect();
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while end > start {
            let sub: String = chars[start..end].iter().collect();
            let key = if start > 0 { format!("##{sub}") } else { sub };
            if let Some(id) = vocab.get(&key) {
                found = Some(id);
                break;
            }
            end -= 1;
        }
        pieces.push((found?, start));
        start = end;
    }
    Some(pieces)
}

/// Tokenizes `text`. Every surface word gets its own `word_group` value;
/// words with no complete segmentation become a single `[UNK]`.
pub fn wordpiece_tokenize(text: &str, vocab: &Vocabulary) -> TokenSequence {
    let mut seq = TokenSequence::default();
    for (group, (offset, word)) in surface_words(text).into_iter().enumerate() {
        let pieces = if word.chars().count() > MAX_WORD_CHARS {
            None
        } else {
            split_word(&word, vocab)
        };
        match pieces {
            Some(pieces) => {
                for (id, rel) in pieces {
                    seq.push(id, group, offset + rel);
                }
            }
            None => seq.push(vocab.unk_id(), group, offset),
        }
    }
    seq
}
