//! Seeded synthetic corpus in MIND layout.
//!
//! Every item belongs to one topic and carries `signal_tokens` tokens from
//! that topic's private signal vocabulary; the remaining positions are
//! filler drawn from a pool shared by all topics. Each user prefers one
//! topic: the history and every clicked item come from it, non-clicked
//! items come from other topics.

use std::fmt::Write as _;
use std::fs;
use std::io::Cursor;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::text::{
    parse_behaviors, parse_news, Impression, NewsFields, NewsMap, Vocabulary, PAD_TOKEN, UNK_TOKEN,
};

/// Where an item's signal tokens are placed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SignalPolicy {
    Front,
    #[default]
    Random,
    Back,
}

impl FromStr for SignalPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "front" => Ok(Self::Front),
            "random" => Ok(Self::Random),
            "back" => Ok(Self::Back),
            other => Err(Error::Config(format!("unknown signal policy `{other}` (front|random|back)"))),
        }
    }
}

impl std::fmt::Display for SignalPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Front => "front",
            Self::Random => "random",
            Self::Back => "back",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_users: usize,
    pub n_items: usize,
    pub n_topics: usize,
    pub tokens_per_item: usize,
    pub signal_tokens: usize,
    pub signal_vocab_per_topic: usize,
    pub filler_vocab: usize,
    pub history_len: usize,
    pub train_impressions: usize,
    pub dev_impressions: usize,
    pub impression_negatives: usize,
    /// Share of users, and of each topic's items, held out for the dev
    /// split. Dev impressions only involve held-out users and items.
    pub dev_fraction: f64,
    pub policy: SignalPolicy,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            n_users: 400,
            n_items: 800,
            n_topics: 8,
            tokens_per_item: 30,
            signal_tokens: 1,
            signal_vocab_per_topic: 4,
            filler_vocab: 200,
            history_len: 5,
            train_impressions: 4,
            dev_impressions: 4,
            impression_negatives: 4,
            dev_fraction: 0.25,
            policy: SignalPolicy::Random,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthItem {
    pub id: String,
    pub topic: usize,
    pub words: Vec<String>,
    /// Positions of the topic-signal tokens within `words`.
    pub signal_positions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthUser {
    pub id: String,
    pub topic: usize,
    pub history: Vec<usize>,
}

/// One logged impression: item indices with click labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthImpression {
    pub user: usize,
    pub items: Vec<(usize, bool)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub vocab_tokens: Vec<String>,
    pub items: Vec<SynthItem>,
    pub users: Vec<SynthUser>,
    pub train: Vec<SynthImpression>,
    pub dev: Vec<SynthImpression>,
}

fn signal_word(topic: usize, j: usize) -> String {
    format!("sig{topic}x{j}")
}

fn filler_word(k: usize) -> String {
    format!("w{k}")
}

/// Generates a corpus; identical configs give identical corpora.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    if cfg.n_topics < 2 {
        return Err(Error::Config("synthetic corpus needs at least 2 topics".into()));
    }
    if cfg.signal_tokens > cfg.signal_vocab_per_topic || cfg.signal_tokens > cfg.tokens_per_item {
        return Err(Error::Config("signal_tokens exceeds signal vocabulary or item length".into()));
    }
    if cfg.filler_vocab == 0 && cfg.signal_tokens < cfg.tokens_per_item {
        return Err(Error::Config("filler vocabulary is empty".into()));
    }
    if !(0.0..1.0).contains(&cfg.dev_fraction) {
        return Err(Error::Config("dev_fraction must lie in [0, 1)".into()));
    }
    let per_topic = cfg.n_items / cfg.n_topics;
    let dev_per_topic = (per_topic as f64 * cfg.dev_fraction).round() as usize;
    let need = cfg.history_len + 1;
    if per_topic - dev_per_topic < need || (dev_per_topic > 0 && dev_per_topic < need) {
        return Err(Error::Config("too few items per topic for the requested history length".into()));
    }
    if cfg.impression_negatives + 1 > cfg.n_items - per_topic {
        return Err(Error::Config("too few off-topic items for the requested negatives".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut vocab_tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
    for t in 0..cfg.n_topics {
        for j in 0..cfg.signal_vocab_per_topic {
            vocab_tokens.push(signal_word(t, j));
        }
    }
    vocab_tokens.extend((0..cfg.filler_vocab).map(filler_word));

    let l = cfg.tokens_per_item;
    let s = cfg.signal_tokens;
    let mut items = Vec::with_capacity(cfg.n_items);
    for i in 0..cfg.n_items {
        let topic = i % cfg.n_topics;
        let positions: Vec<usize> = match cfg.policy {
            SignalPolicy::Front => (0..s).collect(),
            SignalPolicy::Back => (l - s..l).collect(),
            SignalPolicy::Random => {
                let mut p = sample_indices(&mut rng, l, s).into_vec();
                p.sort_unstable();
                p
            }
        };
        let signals = sample_indices(&mut rng, cfg.signal_vocab_per_topic, s).into_vec();
        let mut words: Vec<String> = (0..l)
            .map(|_| filler_word(rng.gen_range(0..cfg.filler_vocab.max(1))))
            .collect();
        for (&p, &j) in positions.iter().zip(&signals) {
            words[p] = signal_word(topic, j);
        }
        items.push(SynthItem {
            id: format!("N{}", i + 1),
            topic,
            words,
            signal_positions: positions,
        });
    }

    // Per topic, the last `dev_per_topic` items form the held-out pool.
    let (mut train_pool, mut dev_pool) = (Vec::new(), Vec::new());
    for t in 0..cfg.n_topics {
        let mut all: Vec<usize> = (0..cfg.n_items).filter(|i| i % cfg.n_topics == t).collect();
        dev_pool.push(all.split_off(all.len() - dev_per_topic));
        train_pool.push(all);
    }
    let pools = [train_pool, dev_pool];
    let n_dev_users = (cfg.n_users as f64 * cfg.dev_fraction).round() as usize;
    let first_dev_user = cfg.n_users - n_dev_users;

    let mut users = Vec::with_capacity(cfg.n_users);
    for u in 0..cfg.n_users {
        let topic = rng.gen_range(0..cfg.n_topics);
        let pool = &pools[usize::from(u >= first_dev_user)][topic];
        let history = sample_indices(&mut rng, pool.len(), cfg.history_len)
            .into_iter()
            .map(|k| pool[k])
            .collect();
        users.push(SynthUser {
            id: format!("U{}", u + 1),
            topic,
            history,
        });
    }

    let impression = |rng: &mut ChaCha8Rng, u: usize| -> SynthImpression {
        let user = &users[u];
        let split = &pools[usize::from(u >= first_dev_user)];
        let pool = &split[user.topic];
        let positive = loop {
            let c = pool[rng.gen_range(0..pool.len())];
            if !user.history.contains(&c) {
                break c;
            }
        };
        let mut entries = vec![(positive, true)];
        while entries.len() < cfg.impression_negatives + 1 {
            let t = rng.gen_range(0..cfg.n_topics);
            if t == user.topic || split[t].is_empty() {
                continue;
            }
            let c = split[t][rng.gen_range(0..split[t].len())];
            if !entries.iter().any(|(e, _)| *e == c) {
                entries.push((c, false));
            }
        }
        entries.shuffle(rng);
        SynthImpression { user: u, items: entries }
    };
    let mut train = Vec::new();
    let mut dev = Vec::new();
    for u in 0..first_dev_user {
        for _ in 0..cfg.train_impressions {
            train.push(impression(&mut rng, u));
        }
    }
    for u in first_dev_user..cfg.n_users {
        for _ in 0..cfg.dev_impressions {
            dev.push(impression(&mut rng, u));
        }
    }

    Ok(SynthCorpus {
        config: cfg.clone(),
        vocab_tokens,
        items,
        users,
        train,
        dev,
    })
}

impl SynthCorpus {
    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::from_tokens(self.vocab_tokens.iter().cloned()).expect("synthetic vocabulary is valid")
    }

    pub fn news_tsv(&self) -> String {
        let mut out = String::new();
        for it in &self.items {
            let _ = writeln!(out, "{}\ttopic{}\tsynthetic\t{}\t\t\t[]\t[]", it.id, it.topic, it.words.join(" "));
        }
        out
    }

    fn behaviors(&self, rows: &[SynthImpression], offset: usize) -> String {
        let mut out = String::new();
        for (k, imp) in rows.iter().enumerate() {
            let user = &self.users[imp.user];
            let history: Vec<&str> = user.history.iter().map(|&i| self.items[i].id.as_str()).collect();
            let shown: Vec<String> = imp
                .items
                .iter()
                .map(|&(i, c)| format!("{}-{}", self.items[i].id, u8::from(c)))
                .collect();
            let _ = writeln!(
                out,
                "{}\t{}\t11/15/2019 {}:00:00 AM\t{}\t{}",
                offset + k + 1,
                user.id,
                (offset + k) % 12 + 1,
                history.join(" "),
                shown.join(" ")
            );
        }
        out
    }

    pub fn train_behaviors_tsv(&self) -> String {
        self.behaviors(&self.train, 0)
    }

    pub fn dev_behaviors_tsv(&self) -> String {
        self.behaviors(&self.dev, self.train.len())
    }

    /// Writes `news.tsv`, `behaviors.tsv`, `behaviors_dev.tsv` and
    /// `vocab.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("news.tsv", self.news_tsv()),
            ("behaviors.tsv", self.train_behaviors_tsv()),
            ("behaviors_dev.tsv", self.dev_behaviors_tsv()),
            ("vocab.txt", self.vocab_tokens.join("\n") + "\n"),
        ];
        for (name, body) in files {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    /// Tokenized news through the regular MIND reader.
    pub fn news_map(&self) -> NewsMap {
        let (news, _) = parse_news(
            Cursor::new(self.news_tsv()),
            &self.vocab(),
            self.config.tokens_per_item,
            NewsFields::TitleAbstract,
        )
        .expect("in-memory read");
        news
    }

    pub fn impressions(&self, news: &NewsMap, dev: bool) -> Vec<Impression> {
        let text = if dev {
            self.dev_behaviors_tsv()
        } else {
            self.train_behaviors_tsv()
        };
        parse_behaviors(Cursor::new(text), news, self.config.history_len.max(1))
            .expect("in-memory read")
            .0
    }

    pub fn item_index(&self, id: &str) -> Option<usize> {
        id.strip_prefix('N')?.parse::<usize>().ok()?.checked_sub(1)
    }

    pub fn user_index(&self, id: &str) -> Option<usize> {
        id.strip_prefix('U')?.parse::<usize>().ok()?.checked_sub(1)
    }
}
