//! Personalized keyword gate: scores every token of every clicked item
//! against a user-interest vector and keeps the top-K per item.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{lstm_last, normal_init, weighted_pool, xavier_uniform, LstmParams};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var, COSINE_EPS};
use crate::recall::InvertedIndex;
use crate::scalar::Scalar;
use crate::text::{TokenSequence, UserHistory, PAD_ID};

const MASKED_LOGIT: f64 = -1e30;

macro_rules! keyword_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($text => Ok(Self::$variant),)+
                    _ => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($name), " '{}' (expected one of: ", $($text, " ",)+ ")"),
                        s
                    ))),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$variant => $text,)+ })
            }
        }
    };
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UserEncoder {
    #[default]
    Lstm,
    Attn,
}
keyword_enum!(UserEncoder { Lstm => "lstm", Attn => "attn" });

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    #[default]
    Token,
    Word,
}
keyword_enum!(Granularity { Token => "token", Word => "word" });

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMethod {
    #[default]
    Learned,
    First,
    Bm25,
    Random,
}
keyword_enum!(GateMethod { Learned => "learned", First => "first", Bm25 => "bm25", Random => "random" });

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    #[serde(alias = "K")]
    pub k: usize,
    pub window: usize,
    /// Conv filter count; also the user-encoder width.
    pub filters: usize,
    pub user_encoder: UserEncoder,
    pub granularity: Granularity,
    pub method: GateMethod,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            k: 3,
            window: 1,
            filters: 32,
            user_encoder: UserEncoder::Lstm,
            granularity: Granularity::Token,
            method: GateMethod::Learned,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("gate.k must be at least 1".into()));
        }
        if self.window == 0 {
            return Err(Error::Config("gate.window must be at least 1".into()));
        }
        if self.filters == 0 {
            return Err(Error::Config("gate.filters must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub enum UserParams {
    Lstm(LstmParams),
    /// Pooling vector `v_u` of the attention variant.
    Attn(ParamId),
}

/// Parameter handles of the gate. The embedding table is shared with the
/// transformer.
#[derive(Clone, Copy, Debug)]
pub struct GateParams {
    pub embeddings: ParamId,
    pub filters: ParamId,
    pub bias: ParamId,
    pub pool: ParamId,
    pub user: UserParams,
    pub window: usize,
    pub n_filters: usize,
}

impl GateParams {
    /// Registers gate weights under `gate.*`.
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        embeddings: ParamId,
        cfg: &GateConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = store.value(embeddings).cols();
        let (nf, span) = (cfg.filters, 2 * cfg.window + 1);
        let filters = store.add("gate.filters", xavier_uniform(rng, &[nf, span * d], span * d, nf));
        let bias = store.add("gate.bias", Tensor::zeros(&[nf]));
        let pool = store.add("gate.pool", normal_init(rng, &[nf], 0.1));
        let user = match cfg.user_encoder {
            UserEncoder::Lstm => {
                let w_input = store.add("gate.lstm.w_input", xavier_uniform(rng, &[nf, 4 * nf], nf, 4 * nf));
                let w_hidden = store.add("gate.lstm.w_hidden", xavier_uniform(rng, &[nf, 4 * nf], nf, 4 * nf));
                let mut b = vec![T::zero(); 4 * nf];
                b[nf..2 * nf].iter_mut().for_each(|x| *x = T::one());
                let bias = store.add("gate.lstm.bias", Tensor::vector(b));
                UserParams::Lstm(LstmParams {
                    w_input,
                    w_hidden,
                    bias,
                    hidden: nf,
                })
            }
            UserEncoder::Attn => UserParams::Attn(store.add("gate.user_pool", normal_init(rng, &[nf], 0.1))),
        };
        Ok(Self {
            embeddings,
            filters,
            bias,
            pool,
            user,
            window: cfg.window,
            n_filters: nf,
        })
    }
}

/// Per-item gate encoding.
#[derive(Clone, Copy, Debug)]
pub struct ItemEncoding {
    /// Token embeddings `[L, d]`.
    pub tokens: Var,
    /// Context features `H`, `[L, N_f]`.
    pub hidden: Var,
    /// Pooled item vector `h`, `[N_f]`.
    pub pooled: Var,
    /// Pooling weights, `[L]`.
    pub alpha: Var,
}

/// Top-K tokens of one item.
#[derive(Clone, Debug)]
pub struct GateSelection {
    /// Indices into the item's token sequence, in selection order.
    pub positions: Vec<usize>,
    pub token_ids: Vec<usize>,
    /// Selection criterion at each position: the raw score for the
    /// learned gate, the BM25 term weight for the BM25 heuristic, zero for
    /// the others.
    pub scores: Vec<f64>,
    /// Values of `weights`.
    pub beta: Vec<f64>,
    /// Raw token scores over the whole item (learned gate only).
    pub raw_scores: Option<Var>,
    /// Normalized importance `β`, `[K_eff]`.
    pub weights: Var,
    /// β-scaled embeddings of the selected tokens, `[K_eff, d]`.
    pub gathered: Var,
}

impl GateSelection {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Learned-gate output for one history.
#[derive(Clone, Debug)]
pub struct GateOutput {
    pub selections: Vec<GateSelection>,
    pub user_interest: Var,
    pub items: Vec<ItemEncoding>,
}

pub fn total_selected(selections: &[GateSelection]) -> usize {
    selections.iter().map(GateSelection::len).sum()
}

pub fn encode_item<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &GateParams,
    seq: &TokenSequence,
) -> Result<ItemEncoding> {
    let l = seq.len();
    if l == 0 {
        return Err(Error::usage("cannot encode an empty item"));
    }
    let pads: Vec<bool> = seq.ids().iter().map(|&id| id == PAD_ID).collect();
    if pads.iter().all(|&x| x) {
        return Err(Error::usage("item consists only of padding"));
    }
    let tokens = tape.embed(store, p.embeddings, seq.ids())?;
    let f = tape.param(store, p.filters);
    let b = tape.param(store, p.bias);
    let conv = tape.conv1d(tokens, f, b, p.window)?;
    let hidden = tape.relu(conv);
    let v = tape.param(store, p.pool);
    let v_col = tape.reshape(v, &[p.n_filters, 1])?;
    let logits = tape.matmul(hidden, v_col)?;
    let mut logits = tape.reshape(logits, &[l])?;
    if pads.iter().any(|&x| x) {
        let mask = pads.iter().map(|&x| if x { T::lit(MASKED_LOGIT) } else { T::zero() }).collect();
        let mask = tape.constant(Tensor::vector(mask));
        logits = tape.add(logits, mask)?;
    }
    let alpha = tape.softmax(logits);
    let a_row = tape.reshape(alpha, &[1, l])?;
    let pooled = tape.matmul(a_row, hidden)?;
    let pooled = tape.reshape(pooled, &[p.n_filters])?;
    Ok(ItemEncoding {
        tokens,
        hidden,
        pooled,
        alpha,
    })
}

fn stack_rows<T: Scalar>(tape: &mut Tape<T>, items: &[Var]) -> Result<Var> {
    if items.is_empty() {
        return Err(Error::usage("user history is empty"));
    }
    let rows = items
        .iter()
        .map(|&h| {
            let n = tape.value(h).len();
            tape.reshape(h, &[1, n])
        })
        .collect::<Result<Vec<_>>>()?;
    tape.concat_rows(&rows)
}

/// User-interest vector from pooled item vectors in chronological order.
pub fn encode_user_interest<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &GateParams,
    items: &[Var],
) -> Result<Var> {
    match p.user {
        UserParams::Lstm(lstm) => {
            let seq = stack_rows(tape, items)?;
            lstm_last(tape, store, &lstm, seq)
        }
        UserParams::Attn(v_u) => attn_user_variant(tape, store, v_u, items),
    }
}

/// Attention pooling over item vectors with a dedicated query `v_u`.
pub fn attn_user_variant<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    v_u: ParamId,
    items: &[Var],
) -> Result<Var> {
    let seq = stack_rows(tape, items)?;
    let q = tape.param(store, v_u);
    Ok(weighted_pool(tape, seq, q)?.0)
}

/// Cosine of each context row against the user-interest vector.
pub fn score_tokens<T: Scalar>(tape: &mut Tape<T>, hidden: Var, user_interest: Var) -> Result<Var> {
    tape.cosine_rows(hidden, user_interest, T::lit(COSINE_EPS))
}

/// Replaces each token score by the mean score of its surface word.
pub fn word_average<T: Scalar>(tape: &mut Tape<T>, seq: &TokenSequence, scores: Var) -> Result<Var> {
    let l = seq.len();
    let groups = seq.word_groups();
    let mut m = vec![T::zero(); l * l];
    for j in 0..l {
        let members: Vec<usize> = (0..l).filter(|&k| groups[k] == groups[j]).collect();
        let w = T::one() / T::lit(members.len() as f64);
        for k in members {
            m[j * l + k] = w;
        }
    }
    let m = tape.constant(Tensor::new(vec![l, l], m)?);
    let col = tape.reshape(scores, &[l, 1])?;
    let out = tape.matmul(m, col)?;
    tape.reshape(out, &[l])
}

/// Positions of the `k` highest scores among first occurrences of each
/// non-pad token id; descending score, ties to the smaller position.
pub fn topk_positions(ids: &[usize], scores: &[f64], k: usize) -> Vec<usize> {
    let mut seen = std::collections::HashSet::new();
    let mut cands: Vec<(usize, f64)> = ids
        .iter()
        .enumerate()
        .filter(|(_, &id)| id != PAD_ID && seen.insert(id))
        .map(|(j, _)| (j, if scores[j].is_nan() { f64::NEG_INFINITY } else { scores[j] }))
        .collect();
    cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    cands.into_iter().take(k).map(|(j, _)| j).collect()
}

/// One-hot template `[K, L]`; carries no gradient.
fn template<T: Scalar>(positions: &[usize], l: usize) -> Result<Tensor<T>> {
    let mut y = vec![T::zero(); positions.len() * l];
    for (row, &j) in positions.iter().enumerate() {
        y[row * l + j] = T::one();
    }
    Tensor::new(vec![positions.len(), l], y)
}

/// Differentiable top-K: gathers the selected rows of `tokens` through a
/// constant one-hot template and scales them by the softmax of their
/// scores.
pub fn select_topk<T: Scalar>(
    tape: &mut Tape<T>,
    seq: &TokenSequence,
    scores: Var,
    tokens: Var,
    k: usize,
) -> Result<GateSelection> {
    if k == 0 {
        return Err(Error::usage("top-K needs K >= 1"));
    }
    let l = seq.len();
    if tape.shape(scores) != [l] {
        return Err(Error::Shape {
            op: "select_topk",
            lhs: vec![l],
            rhs: tape.shape(scores).to_vec(),
        });
    }
    let raw = tape.value(scores).to_f64_vec();
    let positions = topk_positions(seq.ids(), &raw, k);
    if positions.is_empty() {
        return Err(Error::usage("item has no selectable tokens"));
    }
    let y = tape.constant(template(&positions, l)?);
    let gathered = tape.matmul(y, tokens)?;
    let col = tape.reshape(scores, &[l, 1])?;
    let picked = tape.matmul(y, col)?;
    let picked = tape.reshape(picked, &[positions.len()])?;
    let weights = tape.softmax(picked);
    let gathered = tape.scale_rows(gathered, weights)?;
    Ok(GateSelection {
        token_ids: positions.iter().map(|&j| seq.ids()[j]).collect(),
        scores: positions.iter().map(|&j| raw[j]).collect(),
        beta: tape.value(weights).to_f64_vec(),
        positions,
        raw_scores: Some(scores),
        weights,
        gathered,
    })
}

/// Learned gate over a whole history on one tape.
pub fn gate_history<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &GateParams,
    cfg: &GateConfig,
    history: &UserHistory,
) -> Result<GateOutput> {
    let items = history
        .items()
        .iter()
        .map(|seq| encode_item(tape, store, p, seq))
        .collect::<Result<Vec<_>>>()?;
    let pooled: Vec<Var> = items.iter().map(|e| e.pooled).collect();
    let user_interest = encode_user_interest(tape, store, p, &pooled)?;
    let mut selections = Vec::with_capacity(items.len());
    for (seq, enc) in history.items().iter().zip(&items) {
        let mut r = score_tokens(tape, enc.hidden, user_interest)?;
        if cfg.granularity == Granularity::Word {
            r = word_average(tape, seq, r)?;
        }
        selections.push(select_topk(tape, seq, r, enc.tokens, cfg.k)?);
    }
    Ok(GateOutput {
        selections,
        user_interest,
        items,
    })
}

/// Non-learned selection with uniform `β`. Positions are returned in text
/// order.
#[allow(clippy::too_many_arguments)]
pub fn heuristic_gate<T: Scalar, R: Rng>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    embeddings: ParamId,
    history: &UserHistory,
    method: GateMethod,
    k: usize,
    corpus: Option<&InvertedIndex>,
    rng: &mut R,
) -> Result<Vec<GateSelection>> {
    if k == 0 {
        return Err(Error::usage("top-K needs K >= 1"));
    }
    let mut out = Vec::with_capacity(history.len());
    for seq in history.items() {
        let cands = seq.first_occurrences();
        if cands.is_empty() {
            return Err(Error::usage("item has no selectable tokens"));
        }
        let keff = k.min(cands.len());
        let (positions, scores) = match method {
            GateMethod::Learned => return Err(Error::usage("the learned gate is not a heuristic")),
            GateMethod::First => (cands[..keff].to_vec(), vec![0.0; keff]),
            GateMethod::Random => {
                let mut picked: Vec<usize> =
                    rand::seq::index::sample(rng, cands.len(), keff).into_iter().map(|i| cands[i]).collect();
                picked.sort_unstable();
                (picked, vec![0.0; keff])
            }
            GateMethod::Bm25 => {
                let idx = corpus.ok_or_else(|| Error::usage("BM25 gate needs corpus statistics"))?;
                let ids = seq.ids();
                let mut weighted: Vec<(usize, f64)> = cands
                    .iter()
                    .map(|&j| {
                        let tf = ids.iter().filter(|&&x| x == ids[j]).count();
                        (j, idx.term_weight(ids[j], tf, seq.len()))
                    })
                    .collect();
                weighted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                weighted.truncate(keff);
                weighted.sort_by_key(|x| x.0);
                weighted.into_iter().unzip()
            }
        };
        let token_ids: Vec<usize> = positions.iter().map(|&j| seq.ids()[j]).collect();
        let u = 1.0 / keff as f64;
        let e = tape.embed(store, embeddings, &token_ids)?;
        let gathered = tape.scale(e, T::lit(u));
        let weights = tape.constant(Tensor::filled(&[keff], T::lit(u)));
        out.push(GateSelection {
            positions,
            token_ids,
            scores,
            beta: vec![u; keff],
            raw_scores: None,
            weights,
            gathered,
        });
    }
    Ok(out)
}
