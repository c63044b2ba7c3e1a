//! Shared pre-norm transformer encoder, pooled embeddings and click loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::GateSelection;
use crate::numerics::nn::{normal_init, weighted_pool, xavier_uniform};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::scalar::Scalar;
use crate::text::TokenSequence;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_positions: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            d: 64,
            layers: 2,
            heads: 4,
            max_positions: 256,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model.d ({}) must be a positive multiple of model.heads ({})",
                self.d, self.heads
            )));
        }
        if self.max_positions == 0 {
            return Err(Error::Config("model.max_positions must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerParams {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    /// Fused query/key/value projection `[d, 3d]`.
    pub w_qkv: ParamId,
    pub b_qkv: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub w_ff1: ParamId,
    pub b_ff1: ParamId,
    pub w_ff2: ParamId,
    pub b_ff2: ParamId,
}

#[derive(Clone, Debug)]
pub struct TransformerParams {
    pub embeddings: ParamId,
    pub positions: ParamId,
    pub layers: Vec<LayerParams>,
    pub query: ParamId,
    pub d: usize,
    pub heads: usize,
    pub max_positions: usize,
}

impl TransformerParams {
    /// Registers encoder weights under `trans.*`; `embeddings` is shared.
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        embeddings: ParamId,
        cfg: &TransformerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        if store.value(embeddings).cols() != d {
            return Err(Error::Config(format!(
                "embedding width {} differs from model.d {d}",
                store.value(embeddings).cols()
            )));
        }
        let positions = store.add("trans.positions", normal_init(rng, &[cfg.max_positions, d], 0.02));
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let name = |s: &str| format!("trans.layer{l}.{s}");
            layers.push(LayerParams {
                ln1_gamma: store.add(name("ln1.gamma"), Tensor::filled(&[d], T::one())),
                ln1_beta: store.add(name("ln1.beta"), Tensor::zeros(&[d])),
                w_qkv: store.add(name("attn.w_qkv"), xavier_uniform(rng, &[d, 3 * d], d, d)),
                b_qkv: store.add(name("attn.b_qkv"), Tensor::zeros(&[3 * d])),
                w_out: store.add(name("attn.w_out"), xavier_uniform(rng, &[d, d], d, d)),
                b_out: store.add(name("attn.b_out"), Tensor::zeros(&[d])),
                ln2_gamma: store.add(name("ln2.gamma"), Tensor::filled(&[d], T::one())),
                ln2_beta: store.add(name("ln2.beta"), Tensor::zeros(&[d])),
                w_ff1: store.add(name("ff.w1"), xavier_uniform(rng, &[d, 4 * d], d, 4 * d)),
                b_ff1: store.add(name("ff.b1"), Tensor::zeros(&[4 * d])),
                w_ff2: store.add(name("ff.w2"), xavier_uniform(rng, &[4 * d, d], 4 * d, d)),
                b_ff2: store.add(name("ff.b2"), Tensor::zeros(&[d])),
            });
        }
        let query = store.add("trans.query", normal_init(rng, &[d], 0.1));
        Ok(Self {
            embeddings,
            positions,
            layers,
            query,
            d,
            heads: cfg.heads,
            max_positions: cfg.max_positions,
        })
    }
}

fn linear<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let w = tape.param(store, w);
    let b = tape.param(store, b);
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn layer_norm<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, g: ParamId, b: ParamId) -> Result<Var> {
    let g = tape.param(store, g);
    let b = tape.param(store, b);
    tape.layer_norm(x, g, b, T::lit(LN_EPS))
}

/// One pre-norm layer on `x[n, d]`. Also returns the per-head attention
/// probabilities `[n, n]`.
pub fn encoder_layer<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &LayerParams,
    x: Var,
    d: usize,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let dh = d / heads;
    let a = layer_norm(tape, store, x, p.ln1_gamma, p.ln1_beta)?;
    let qkv = linear(tape, store, a, p.w_qkv, p.b_qkv)?;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = tape.slice_cols(qkv, h * dh, dh)?;
        let k = tape.slice_cols(qkv, d + h * dh, dh)?;
        let v = tape.slice_cols(qkv, 2 * d + h * dh, dh)?;
        let s = tape.matmul_nt(q, k)?;
        let s = tape.scale(s, scale);
        let pr = tape.softmax(s);
        outs.push(tape.matmul(pr, v)?);
        probs.push(pr);
    }
    let o = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let o = linear(tape, store, o, p.w_out, p.b_out)?;
    let x = tape.add(x, o)?;
    let b = layer_norm(tape, store, x, p.ln2_gamma, p.ln2_beta)?;
    let f = linear(tape, store, b, p.w_ff1, p.b_ff1)?;
    let f = tape.gelu(f);
    let f = linear(tape, store, f, p.w_ff2, p.b_ff2)?;
    Ok((tape.add(x, f)?, probs))
}

/// Adds learned positions `0..n` to `inputs[n, d]` and runs every layer.
pub fn encode_sequence<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &TransformerParams,
    inputs: Var,
) -> Result<Var> {
    let shape = tape.shape(inputs).to_vec();
    if shape.len() != 2 || shape[1] != p.d || shape[0] == 0 {
        return Err(Error::Shape {
            op: "encode_sequence",
            lhs: shape,
            rhs: vec![p.max_positions, p.d],
        });
    }
    let n = shape[0];
    if n > p.max_positions {
        return Err(Error::usage(format!(
            "sequence of {n} tokens exceeds model.max_positions = {}",
            p.max_positions
        )));
    }
    let table = tape.param(store, p.positions);
    let pos = tape.slice_rows(table, 0, n)?;
    let mut x = tape.add(inputs, pos)?;
    for layer in &p.layers {
        x = encoder_layer(tape, store, layer, x, p.d, p.heads)?.0;
    }
    Ok(x)
}

/// Weighted pooling of encoder outputs with the learned query.
pub fn pool<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, p: &TransformerParams, hidden: Var) -> Result<Var> {
    let q = tape.param(store, p.query);
    Ok(weighted_pool(tape, hidden, q)?.0)
}

/// User embedding from the concatenated gated tokens of all history items.
pub fn encode_user<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &TransformerParams,
    selections: &[GateSelection],
) -> Result<Var> {
    let parts: Vec<Var> = selections.iter().filter(|s| !s.is_empty()).map(|s| s.gathered).collect();
    if parts.is_empty() {
        return Err(Error::usage("no gated tokens to encode"));
    }
    let inputs = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
    let hidden = encode_sequence(tape, store, p, inputs)?;
    pool(tape, store, p, hidden)
}

/// Candidate embedding from the full, ungated item text.
pub fn encode_candidate<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &TransformerParams,
    seq: &TokenSequence,
) -> Result<Var> {
    if seq.is_empty() {
        return Err(Error::usage("cannot encode an empty candidate"));
    }
    let e = tape.embed(store, p.embeddings, seq.ids())?;
    let hidden = encode_sequence(tape, store, p, e)?;
    pool(tape, store, p, hidden)
}

/// `<u, c> / sqrt(d)`.
pub fn score<T: Scalar>(tape: &mut Tape<T>, u: Var, c: Var) -> Result<Var> {
    let d = tape.value(u).len();
    let z = tape.dot(u, c)?;
    Ok(tape.scale(z, T::one() / T::lit(d as f64).sqrt()))
}

/// Softmax cross-entropy of the clicked item against sampled negatives.
pub fn click_loss<T: Scalar>(tape: &mut Tape<T>, u: Var, positive: Var, negatives: &[Var]) -> Result<Var> {
    if negatives.is_empty() {
        return Err(Error::usage("click loss needs at least one negative"));
    }
    let mut zs = Vec::with_capacity(negatives.len() + 1);
    for &c in std::iter::once(&positive).chain(negatives) {
        let z = score(tape, u, c)?;
        zs.push(tape.reshape(z, &[1])?);
    }
    scores_loss(tape, &zs)
}

/// `logsumexp(z) - z[0]` over scalar-vector scores `[1]`.
pub fn scores_loss<T: Scalar>(tape: &mut Tape<T>, zs: &[Var]) -> Result<Var> {
    let z = tape.concat_rows(zs)?;
    let lse = tape.logsumexp(z)?;
    let pos = tape.index(z, 0)?;
    tape.sub(lse, pos)
}

#[cfg(test)]
mod tests;
