//! Composite layers built from tape primitives.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Single-layer LSTM weights. Gate blocks are laid out as
/// `[input | forget | cell | output]` along the last axis.
#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

/// Runs a standard LSTM over `seq[N, n_in]` from a zero state and returns
/// the last hidden state `h_N` as a vector of length `hidden`.
pub fn lstm_last<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &LstmParams,
    seq: Var,
) -> Result<Var> {
    let shape = tape.shape(seq).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::usage(format!("lstm input must be [N>=1, n_in], got {shape:?}")));
    }
    let g = p.hidden;
    let wi = tape.param(store, p.w_input);
    let wh = tape.param(store, p.w_hidden);
    let b = tape.param(store, p.bias);
    let mut h = tape.constant(Tensor::zeros(&[1, g]));
    let mut c = tape.constant(Tensor::zeros(&[1, g]));
    for t in 0..shape[0] {
        let x = tape.slice_rows(seq, t, 1)?;
        let xi = tape.matmul(x, wi)?;
        let hh = tape.matmul(h, wh)?;
        let pre = tape.add(xi, hh)?;
        let pre = tape.add_row(pre, b)?;
        let i_pre = tape.slice_cols(pre, 0, g)?;
        let f_pre = tape.slice_cols(pre, g, g)?;
        let c_pre = tape.slice_cols(pre, 2 * g, g)?;
        let o_pre = tape.slice_cols(pre, 3 * g, g)?;
        let i = tape.sigmoid(i_pre);
        let f = tape.sigmoid(f_pre);
        let cand = tape.tanh(c_pre);
        let o = tape.sigmoid(o_pre);
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, cand)?;
        c = tape.add(keep, write)?;
        let tc = tape.tanh(c);
        h = tape.mul(o, tc)?;
    }
    tape.reshape(h, &[g])
}

/// Glorot-uniform initialization for a tensor of `shape`.
pub fn xavier_uniform<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a);
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Zero-mean Gaussian initialization.
pub fn normal_init<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Attention-style pooling: `Σ_j α_j x_j` with `α = softmax(x · query)`.
/// Returns the pooled vector and the weights.
pub fn weighted_pool<T: Scalar>(tape: &mut Tape<T>, x: Var, query: Var) -> Result<(Var, Var)> {
    let shape = tape.shape(x).to_vec();
    let n = *shape.last().unwrap_or(&0);
    if shape.len() != 2 || tape.shape(query) != [n] {
        return Err(Error::Shape {
            op: "weighted_pool",
            lhs: shape,
            rhs: tape.shape(query).to_vec(),
        });
    }
    let l = shape[0];
    let q = tape.reshape(query, &[n, 1])?;
    let logits = tape.matmul(x, q)?;
    let logits = tape.reshape(logits, &[l])?;
    let alpha = tape.softmax(logits);
    let a_row = tape.reshape(alpha, &[1, l])?;
    let pooled = tape.matmul(a_row, x)?;
    let pooled = tape.reshape(pooled, &[n])?;
    Ok((pooled, alpha))
}
