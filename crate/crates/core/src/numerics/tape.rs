//! Define-by-run reverse-mode differentiation over dense tensors.
//!
//! Every operation appends a node holding its output value and the handles
//! of its inputs. [`Tape::backward`] walks the nodes once in reverse index
//! order, so accumulation order is fixed and results are bit-reproducible.
//! Parameters are copied into the tape as leaves; gradients reach the
//! [`ParamStore`] through [`Gradients::accumulate_into`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::cost;
use crate::numerics::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc};
use crate::numerics::{ParamId, ParamStore, Tensor};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Embed { param: ParamId, ids: Vec<usize> },
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    ScaleRows(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Softmax(Var),
    Sum(Var),
    LogSumExp(Var),
    Index(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Conv1d {
        input: Var,
        filters: Var,
        bias: Var,
        window: usize,
    },
    CosineRows {
        rows: Var,
        v: Var,
        eps: T,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<T>,
        rstd: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation for one forward pass. Single-threaded; create one
/// tape per sample.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    flops: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            flops: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Floating-point operations executed by forward ops so far, using the
    /// per-op constants in [`cost`].
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert!(
            value.data().iter().all(|x| !x.is_nan()),
            "NaN produced by {op:?}"
        );
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Loads a parameter onto the tape. Repeated loads of the same
    /// parameter return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    /// Gathers rows `ids` of a `[V, d]` parameter table.
    pub fn embed(&mut self, store: &ParamStore<T>, id: ParamId, ids: &[usize]) -> Result<Var> {
        let table = store.value(id);
        if table.rank() != 2 {
            return Err(Error::usage(format!(
                "embedding table must be a matrix, got {:?}",
                table.shape()
            )));
        }
        let d = table.cols();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= table.rows() {
                return Err(Error::usage(format!(
                    "token id {i} out of range for vocabulary of {}",
                    table.rows()
                )));
            }
            data.extend_from_slice(table.row(i));
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            value,
            Op::Embed {
                param: id,
                ids: ids.to_vec(),
            },
            true,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.flops += cost::matmul(m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ` for `a[m,k]`, `b[n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![T::zero(); m * n];
        gemm_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.flops += cost::matmul(m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(shape_err("transpose", self.shape(a), &[]));
        }
        let t = self.value(a).transposed();
        let ng = self.needs(a);
        Ok(self.push(t, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let ng = self.needs(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        self.flops += cost::elementwise(t.len());
        t
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// Adds vector `b[n]` to every row of `a[.., n]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(a).cols();
        if self.shape(b) != [n] {
            return Err(shape_err("add_row", self.shape(a), self.shape(b)));
        }
        let bv = self.value(b).data().to_vec();
        let mut t = self.value(a).clone();
        for row in t.data_mut().chunks_mut(n) {
            for (x, &y) in row.iter_mut().zip(&bv) {
                *x += y;
            }
        }
        self.flops += cost::elementwise(t.len());
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::AddRow(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.flops += cost::elementwise(t.len());
        let ng = self.needs(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    /// Multiplies row `i` of `a[m, n]` by `s[i]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let m = self.value(a).rows();
        if self.shape(s) != [m] || self.shape(a).len() != 2 {
            return Err(shape_err("scale_rows", self.shape(a), self.shape(s)));
        }
        let n = self.value(a).cols();
        let sv = self.value(s).data().to_vec();
        let mut t = self.value(a).clone();
        for (row, &c) in t.data_mut().chunks_mut(n).zip(&sv) {
            row.iter_mut().for_each(|x| *x *= c);
        }
        self.flops += cost::elementwise(t.len());
        let ng = self.needs(a) || self.needs(s);
        Ok(self.push(t, Op::ScaleRows(a, s), ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(a).map(f);
        self.flops += cost::activation(t.len());
        let ng = self.needs(a);
        self.push(t, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu_value, Op::Gelu(a))
    }

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let n = src.cols();
        let mut t = src.clone();
        if n > 0 {
            for row in t.data_mut().chunks_mut(n) {
                softmax_in_place(row);
            }
        }
        self.flops += cost::softmax(t.len());
        let ng = self.needs(a);
        self.push(t, Op::Softmax(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.flops += cost::elementwise(self.value(a).len());
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    /// `ln Σ exp(x)` over all elements, computed stably.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::usage("logsumexp of empty tensor"));
        }
        let s = logsumexp(v.data());
        self.flops += cost::softmax(v.len());
        let ng = self.needs(a);
        Ok(self.push(Tensor::scalar(s), Op::LogSumExp(a), ng))
    }

    /// Element `i` of the flattened tensor, as a scalar.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let v = self.value(a);
        if i >= v.len() {
            return Err(shape_err("index", v.shape(), &[i]));
        }
        let s = v.data()[i];
        let ng = self.needs(a);
        Ok(self.push(Tensor::scalar(s), Op::Index(a, i), ng))
    }

    /// Concatenates along the first axis. Vectors concatenate into a
    /// vector, matrices must share their column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::usage("concat of zero tensors"))?;
        let rank = self.shape(first).len();
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = match rank {
                0 => s.is_empty(),
                1 => s.len() == 1,
                _ => s.len() == 2 && s[1] == cols,
            };
            if !ok {
                return Err(shape_err("concat_rows", self.shape(first), s));
            }
            rows += if rank == 2 { s[0] } else { self.value(p).len() };
            data.extend_from_slice(self.value(p).data());
        }
        let shape = if rank == 2 { vec![rows, cols] } else { vec![rows] };
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(shape, data)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::usage("concat of zero tensors"))?;
        let m = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != m {
                return Err(shape_err("concat_cols", self.shape(first), s));
            }
            total += s[1];
        }
        let mut data = vec![T::zero(); m * total];
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            let c = v.cols();
            for i in 0..m {
                data[i * total + off..i * total + off + c].copy_from_slice(v.row(i));
            }
            off += c;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(vec![m, total], data)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Rows `start..start+len` of a matrix (elements, for a vector).
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        let (rows, cols) = if v.rank() == 1 { (v.len(), 1) } else { (v.rows(), v.cols()) };
        if start + len > rows || v.rank() > 2 || v.rank() == 0 {
            return Err(shape_err("slice_rows", v.shape(), &[start, len]));
        }
        let data = v.data()[start * cols..(start + len) * cols].to_vec();
        let shape = if v.rank() == 1 { vec![len] } else { vec![len, cols] };
        let ng = self.needs(a);
        Ok(self.push(Tensor::new(shape, data)?, Op::SliceRows(a, start), ng))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 2 || start + len > v.cols() {
            return Err(shape_err("slice_cols", v.shape(), &[start, len]));
        }
        let m = v.rows();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&v.row(i)[start..start + len]);
        }
        let ng = self.needs(a);
        Ok(self.push(Tensor::new(vec![m, len], data)?, Op::SliceCols(a, start), ng))
    }

    /// Stride-1 convolution over a `[L, d]` sequence with `window` zero
    /// rows padded on each side; output has `L` rows and one column per
    /// filter. Filter row layout is `[offset -window .. +window] × d`.
    /// No activation is applied.
    pub fn conv1d(&mut self, input: Var, filters: Var, bias: Var, window: usize) -> Result<Var> {
        let (si, sf, sb) = (self.shape(input), self.shape(filters), self.shape(bias));
        if si.len() != 2 || sf.len() != 2 || sb.len() != 1 {
            return Err(shape_err("conv1d", si, sf));
        }
        let (l, d) = (si[0], si[1]);
        let (nf, span) = (sf[0], 2 * window + 1);
        if sf[1] != span * d || sb[0] != nf {
            return Err(shape_err("conv1d", si, sf));
        }
        let x = self.value(input).data();
        let f = self.value(filters).data();
        let b = self.value(bias).data();
        let mut out = vec![T::zero(); l * nf];
        for j in 0..l {
            for k in 0..nf {
                let frow = &f[k * span * d..(k + 1) * span * d];
                let mut acc = T::zero();
                for o in 0..span {
                    let src = j as isize + o as isize - window as isize;
                    if src < 0 || src >= l as isize {
                        continue;
                    }
                    let xr = &x[src as usize * d..(src as usize + 1) * d];
                    let fr = &frow[o * d..(o + 1) * d];
                    for (&xv, &fv) in xr.iter().zip(fr) {
                        acc += xv * fv;
                    }
                }
                out[j * nf + k] = acc + b[k];
            }
        }
        self.flops += cost::conv1d(l, d, nf, window);
        let ng = self.needs(input) || self.needs(filters) || self.needs(bias);
        Ok(self.push(
            Tensor::new(vec![l, nf], out)?,
            Op::Conv1d {
                input,
                filters,
                bias,
                window,
            },
            ng,
        ))
    }

    /// Cosine similarity between each row of `rows[L, n]` and `v[n]`.
    /// Norms are clamped below by `eps`.
    pub fn cosine_rows(&mut self, rows: Var, v: Var, eps: T) -> Result<Var> {
        let (sr, sv) = (self.shape(rows), self.shape(v));
        if sr.len() != 2 || sv.len() != 1 || sr[1] != sv[0] {
            return Err(shape_err("cosine_rows", sr, sv));
        }
        let h = self.value(rows);
        let u = self.value(v);
        let nu = u.norm().max(eps);
        let out: Vec<T> = (0..h.rows())
            .map(|j| {
                let r = h.row(j);
                let dot: T = r.iter().zip(u.data()).map(|(&a, &b)| a * b).sum();
                let nr = r.iter().map(|&a| a * a).sum::<T>().sqrt().max(eps);
                dot / (nr * nu)
            })
            .collect();
        self.flops += cost::cosine_rows(h.rows(), h.cols());
        let ng = self.needs(rows) || self.needs(v);
        Ok(self.push(Tensor::vector(out), Op::CosineRows { rows, v, eps }, ng))
    }

    /// Scalar cosine similarity of two vectors.
    pub fn cosine(&mut self, a: Var, b: Var, eps: T) -> Result<Var> {
        let n = self.value(a).len();
        let ar = self.reshape(a, &[1, n])?;
        let r = self.cosine_rows(ar, b, eps)?;
        self.reshape(r, &[])
    }

    /// Per-row layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let n = self.value(x).cols();
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.value(x);
        let m = xv.rows();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let nt = T::from_usize(n).unwrap();
        let mut normalized = Vec::with_capacity(m * n);
        let mut rstd = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / nt;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (k, &a) in row.iter().enumerate() {
                let xh = (a - mean) * rs;
                normalized.push(xh);
                out.push(xh * g[k] + b[k]);
            }
        }
        let shape = xv.shape().to_vec();
        self.flops += cost::layer_norm(m * n);
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                rstd,
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar `loss`. Returns the gradient of `loss`
    /// with respect to every node that depends on a trainable input.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Some(g) = grads[i].take() {
                self.propagate(i, &g, &mut grads);
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) | Op::Embed { .. } => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if self.needs(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm_nt_acc(g.data(), vb.data(), &mut ga, m, n, k);
                    self.acc_raw(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm_tn_acc(va.data(), g.data(), &mut gb, m, k, n);
                    self.acc_raw(grads, *b, gb);
                }
            }
            Op::MatMulNt(a, b) => {
                // c = a bᵀ: ga = g b, gb = gᵀ a
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.rows());
                if self.needs(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm_acc(g.data(), vb.data(), &mut ga, m, n, k);
                    self.acc_raw(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![T::zero(); n * k];
                    gemm_tn_acc(g.data(), va.data(), &mut gb, m, n, k);
                    self.acc_raw(grads, *b, gb);
                }
            }
            Op::Transpose(a) => {
                self.acc_raw(grads, *a, g.transposed().into_data());
            }
            Op::Reshape(a) => self.acc_raw(grads, *a, g.data().to_vec()),
            Op::Add(a, b) => {
                self.acc_raw(grads, *a, g.data().to_vec());
                self.acc_raw(grads, *b, g.data().to_vec());
            }
            Op::Sub(a, b) => {
                self.acc_raw(grads, *a, g.data().to_vec());
                self.acc_raw(grads, *b, g.data().iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let ga = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    self.acc_raw(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    self.acc_raw(grads, *b, gb);
                }
            }
            Op::AddRow(a, b) => {
                self.acc_raw(grads, *a, g.data().to_vec());
                if self.needs(*b) {
                    let n = g.cols();
                    let mut gb = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (s, &x) in gb.iter_mut().zip(row) {
                            *s += x;
                        }
                    }
                    self.acc_raw(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => {
                self.acc_raw(grads, *a, g.data().iter().map(|&x| x * *c).collect());
            }
            Op::ScaleRows(a, s) => {
                let (va, vs) = (self.value(*a), self.value(*s));
                let n = va.cols();
                if self.needs(*a) {
                    let mut ga = g.data().to_vec();
                    for (row, &c) in ga.chunks_mut(n).zip(vs.data()) {
                        row.iter_mut().for_each(|x| *x *= c);
                    }
                    self.acc_raw(grads, *a, ga);
                }
                if self.needs(*s) {
                    let gs = g
                        .data()
                        .chunks(n)
                        .zip(va.data().chunks(n))
                        .map(|(gr, ar)| gr.iter().zip(ar).map(|(&x, &y)| x * y).sum())
                        .collect();
                    self.acc_raw(grads, *s, gs);
                }
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                let ga = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(&x, &v)| if v > T::zero() { x } else { T::zero() })
                    .collect();
                self.acc_raw(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&x, &y)| x * y * (T::one() - y))
                    .collect();
                self.acc_raw(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&x, &y)| x * (T::one() - y * y))
                    .collect();
                self.acc_raw(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                let ga = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(&x, &v)| x * gelu_grad(v))
                    .collect();
                self.acc_raw(grads, *a, ga);
            }
            Op::Softmax(a) => {
                let n = out.cols();
                let mut ga = Vec::with_capacity(out.len());
                for (gr, yr) in g.data().chunks(n).zip(out.data().chunks(n)) {
                    let s: T = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum();
                    ga.extend(gr.iter().zip(yr).map(|(&x, &y)| y * (x - s)));
                }
                self.acc_raw(grads, *a, ga);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.acc_raw(grads, *a, vec![g.item(); n]);
            }
            Op::LogSumExp(a) => {
                let mut p = self.value(*a).data().to_vec();
                softmax_in_place(&mut p);
                let gv = g.item();
                self.acc_raw(grads, *a, p.into_iter().map(|x| x * gv).collect());
            }
            Op::Index(a, k) => {
                let mut ga = vec![T::zero(); self.value(*a).len()];
                ga[*k] = g.item();
                self.acc_raw(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc_raw(grads, p, g.data()[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let m = g.rows();
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(m * c);
                        for r in 0..m {
                            gp.extend_from_slice(&g.data()[r * total + off..r * total + off + c]);
                        }
                        self.acc_raw(grads, p, gp);
                    }
                    off += c;
                }
            }
            Op::SliceRows(a, start) => {
                let va = self.value(*a);
                let cols = if va.rank() == 1 { 1 } else { va.cols() };
                let mut ga = vec![T::zero(); va.len()];
                ga[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                self.acc_raw(grads, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let va = self.value(*a);
                let (m, n, c) = (va.rows(), va.cols(), g.cols());
                let mut ga = vec![T::zero(); va.len()];
                for r in 0..m {
                    ga[r * n + start..r * n + start + c].copy_from_slice(g.row(r));
                }
                self.acc_raw(grads, *a, ga);
            }
            Op::Conv1d {
                input,
                filters,
                bias,
                window,
            } => {
                let (vx, vf) = (self.value(*input), self.value(*filters));
                let (l, d) = (vx.rows(), vx.cols());
                let nf = vf.rows();
                let span = 2 * window + 1;
                let (x, f, gd) = (vx.data(), vf.data(), g.data());
                let mut gx = vec![T::zero(); x.len()];
                let mut gf = vec![T::zero(); f.len()];
                let mut gb = vec![T::zero(); nf];
                for j in 0..l {
                    for k in 0..nf {
                        let go = gd[j * nf + k];
                        gb[k] += go;
                        if go == T::zero() {
                            continue;
                        }
                        for o in 0..span {
                            let src = j as isize + o as isize - *window as isize;
                            if src < 0 || src >= l as isize {
                                continue;
                            }
                            let s = src as usize;
                            let fo = k * span * d + o * d;
                            for c in 0..d {
                                gx[s * d + c] += go * f[fo + c];
                                gf[fo + c] += go * x[s * d + c];
                            }
                        }
                    }
                }
                self.acc_raw(grads, *input, gx);
                self.acc_raw(grads, *filters, gf);
                self.acc_raw(grads, *bias, gb);
            }
            Op::CosineRows { rows, v, eps } => {
                let (h, u) = (self.value(*rows), self.value(*v));
                let n = h.cols();
                let nu_raw = u.norm();
                let nu = nu_raw.max(*eps);
                let mut gh = vec![T::zero(); h.len()];
                let mut gu = vec![T::zero(); n];
                for j in 0..h.rows() {
                    let gj = g.data()[j];
                    let r = out.data()[j];
                    let a = h.row(j);
                    let na_raw = a.iter().map(|&x| x * x).sum::<T>().sqrt();
                    let na = na_raw.max(*eps);
                    let denom = na * nu;
                    // d r / d a = u/(|a||u|) - r a/(|a| na) when |a| > eps
                    let ca = if na_raw > *eps { r / (na_raw * na) } else { T::zero() };
                    let cu = if nu_raw > *eps { r / (nu_raw * nu) } else { T::zero() };
                    for c in 0..n {
                        gh[j * n + c] += gj * (u.data()[c] / denom - ca * a[c]);
                        gu[c] += gj * (a[c] / denom - cu * u.data()[c]);
                    }
                }
                self.acc_raw(grads, *rows, gh);
                self.acc_raw(grads, *v, gu);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                rstd,
            } => {
                let n = out.cols();
                let nt = T::from_usize(n).unwrap();
                let gam = self.value(*gamma).data();
                let mut gx = vec![T::zero(); out.len()];
                let mut gg = vec![T::zero(); n];
                let mut gbeta = vec![T::zero(); n];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let xh = &normalized[r * n..(r + 1) * n];
                    let mut mean_g = T::zero();
                    let mut mean_gx = T::zero();
                    for k in 0..n {
                        let gxh = gr[k] * gam[k];
                        mean_g += gxh;
                        mean_gx += gxh * xh[k];
                        gg[k] += gr[k] * xh[k];
                        gbeta[k] += gr[k];
                    }
                    mean_g /= nt;
                    mean_gx /= nt;
                    for k in 0..n {
                        let gxh = gr[k] * gam[k];
                        gx[r * n + k] = rs * (gxh - mean_g - xh[k] * mean_gx);
                    }
                }
                self.acc_raw(grads, *x, gx);
                self.acc_raw(grads, *gamma, gg);
                self.acc_raw(grads, *beta, gbeta);
            }
        }
    }

    fn acc_raw(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => {
                let shape = self.shape(v).to_vec();
                *slot = Some(Tensor::new(shape, g).expect("gradient shape"));
            }
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds the gradients of every parameter node (and embedding gather)
    /// into the parameters' gradient slots, scaled by `weight`.
    pub fn accumulate_into(&self, tape: &Tape<T>, store: &mut ParamStore<T>, weight: T) {
        for (i, node) in tape.nodes.iter().enumerate() {
            let Some(g) = &self.grads[i] else { continue };
            match &node.op {
                Op::Param(id) => {
                    let slot = &mut store.get_mut(*id).grad;
                    for (a, &b) in slot.data_mut().iter_mut().zip(g.data()) {
                        *a += b * weight;
                    }
                }
                Op::Embed { param, ids } => {
                    let slot = &mut store.get_mut(*param).grad;
                    let d = slot.cols();
                    let data = slot.data_mut();
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            data[id * d + c] += g.data()[r * d + c] * weight;
                        }
                    }
                }
                _ => {}
            }
        }
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

/// Stable softmax of a slice.
pub fn softmax<T: Scalar>(xs: &[T]) -> Vec<T> {
    let mut v = xs.to_vec();
    softmax_in_place(&mut v);
    v
}

/// Stable `ln Σ exp(x)`.
pub fn logsumexp<T: Scalar>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if max.is_infinite() {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

fn gelu_value<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
}
