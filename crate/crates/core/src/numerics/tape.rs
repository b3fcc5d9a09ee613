//! Reverse-mode automatic differentiation over a linear operation record.
//!
//! Every op evaluates eagerly and appends a node holding its value and the
//! inputs it needs for the backward sweep. Parameters are borrowed from a
//! [`ParamStore`] rather than copied, so many tapes can share one model
//! across threads.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use super::tensor::{
    as_matrix, gemm_nn, gemm_nt, gemm_tn, log_softmax_row, softmax_row, Tensor, MASK_SENTINEL,
};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered model parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Silu(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    DepthwiseConv { x: Var, kernel: Var, bias: Var },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Unfold { x: Var, window: usize, stride: usize },
    Gather { x: Var, idx: Vec<usize> },
    MaskFill { x: Var, allow: Vec<bool> },
    PairSum { a: Var, b: Var },
    Sum(Var),
    Precomputed { input: Var, grad: Vec<f64> },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
    params: Option<&'a ParamStore>,
    bound: Vec<Option<Var>>,
    track_params: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), params: None, bound: Vec::new(), track_params: true }
    }

    /// A tape that can bind parameters from `store`; parameter gradients are
    /// recorded.
    pub fn with_params(store: &'a ParamStore) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: Some(store),
            bound: vec![None; store.len()],
            track_params: true,
        }
    }

    /// Like [`Tape::with_params`] but parameters are constants; used for
    /// inference.
    pub fn inference(store: &'a ParamStore) -> Self {
        let mut t = Self::with_params(store);
        t.track_params = false;
        t
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Differentiable input owned by the tape.
    pub fn var(&mut self, t: Tensor) -> Var {
        self.push_raw(Cow::Owned(t), Op::Leaf, true)
    }

    /// Differentiable input borrowed from the caller.
    pub fn var_ref(&mut self, t: &'a Tensor) -> Var {
        self.push_raw(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(Cow::Owned(t), Op::Leaf, false)
    }

    /// Binds parameter `id`; repeated calls return the same node so that
    /// gradients from every use accumulate in one place.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let store = self.params.expect("tape has no parameter store");
        let v = self.push_raw(Cow::Borrowed(store.get(id)), Op::Param, self.track_params);
        self.bound[id.0] = Some(v);
        v
    }

    fn push_raw(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(Cow::Owned(value), op, requires_grad))
    }

    fn mat(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        as_matrix(self.value(v), op)
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// a · bᵀ
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul_nt")?;
        let (n, k2) = self.mat(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("[{m}x{k}] * [{n}x{k2}]^T")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), &[a, b], "matmul_nt")
    }

    // ---- elementwise ---------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::Add(a, b), &[a, b], "add")
    }

    /// Adds vector `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let c = ta.cols();
        if tb.len() != c {
            return Err(Error::shape("add_row", format!("row of {c} vs vector of {}", tb.len())));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            for (x, y) in row.iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::AddRow(a, b), &[a, b], "add_row")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * c).collect())?;
        self.push(out, Op::Scale(a, c), &[a], "scale")
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op, name: &'static str) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect())?;
        self.push(out, op, &[a], name)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(a, f64::tanh, Op::Tanh(a), "tanh")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, sigmoid, Op::Sigmoid(a), "sigmoid")
    }

    /// x·sigmoid(x), the swish activation.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.map(a, |x| x * sigmoid(x), Op::Silu(a), "silu")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, |x| x.max(0.0), Op::Relu(a), "relu")
    }

    // ---- row-wise normalisation ---------------------------------------

    /// Softmax over the last dimension. Entries at or below the masked
    /// cutoff get exactly zero weight; a row with no remaining entry is an
    /// error.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        if c == 0 {
            return Err(Error::shape("softmax", "empty last dimension"));
        }
        let mut out = vec![0.0; ta.len()];
        for (r, (xrow, orow)) in ta.data().chunks(c).zip(out.chunks_mut(c)).enumerate() {
            if !softmax_row(xrow, orow) {
                return Err(Error::EmptyRow { row: r });
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), out)?;
        self.push(out, Op::Softmax(a), &[a], "softmax")
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        if c == 0 {
            return Err(Error::shape("log_softmax", "empty last dimension"));
        }
        let mut out = vec![0.0; ta.len()];
        for (xrow, orow) in ta.data().chunks(c).zip(out.chunks_mut(c)) {
            if !log_softmax_row(xrow, orow) {
                return Err(Error::NonFinite { op: "log_softmax" });
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), out)?;
        self.push(out, Op::LogSoftmax(a), &[a], "log_softmax")
    }

    /// Per-row layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.cols();
        if d < 2 {
            return Err(Error::shape("layer_norm", "normalised axis must have at least 2 entries"));
        }
        let (g, b) = (self.value(gain), self.value(bias));
        if g.len() != d || b.len() != d {
            return Err(Error::shape("layer_norm", format!("gain/bias length vs {d}")));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias], "layer_norm")
    }

    // ---- indexing and layout ------------------------------------------

    /// Row lookup: output row i is `table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = as_matrix(t, "embedding")?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::OutOfVocabulary { id, vocab: v });
            }
            out.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        self.push(out, Op::Embedding { table, ids: ids.to_vec() }, &[table], "embedding")
    }

    /// Depthwise 1-D convolution over rows without padding: for input of
    /// `L + k - 1` rows and a `k × d` kernel the output has `L` rows and
    /// `out[t][c] = bias[c] + Σ_j kernel[j][c] · x[t + j][c]`.
    pub fn depthwise_conv(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.mat(x, "depthwise_conv")?;
        let (k, d2) = self.mat(kernel, "depthwise_conv")?;
        let tb = self.value(bias);
        if d != d2 || tb.len() != d {
            return Err(Error::shape("depthwise_conv", format!("channels {d} vs {d2}/{}", tb.len())));
        }
        if n + 1 < k {
            return Err(Error::shape("depthwise_conv", format!("{n} rows shorter than kernel {k}")));
        }
        let l = n + 1 - k;
        let (tx, tk) = (self.value(x).data(), self.value(kernel).data());
        let mut out = vec![0.0; l * d];
        for t in 0..l {
            let orow = &mut out[t * d..(t + 1) * d];
            orow.copy_from_slice(tb.data());
            for j in 0..k {
                let xr = &tx[(t + j) * d..(t + j + 1) * d];
                let kr = &tk[j * d..(j + 1) * d];
                for c in 0..d {
                    orow[c] += kr[c] * xr[c];
                }
            }
        }
        let out = Tensor::new(vec![l, d], out)?;
        self.push(out, Op::DepthwiseConv { x, kernel, bias }, &[x, kernel, bias], "depthwise_conv")
    }

    /// Causal depthwise convolution: left-pads `k - 1` zero rows.
    pub fn causal_depthwise_conv(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let k = self.value(kernel).rows();
        let d = self.value(x).cols();
        let padded = if k > 1 {
            let zeros = self.constant(Tensor::zeros(&[k - 1, d]));
            self.concat_rows(&[zeros, x])?
        } else {
            x
        };
        self.depthwise_conv(padded, kernel, bias)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|v| self.value(*v)).collect();
        let out = Tensor::concat_rows(&tensors)?;
        self.push(out, Op::ConcatRows(parts.to_vec()), parts, "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |v| self.value(*v).rows());
        if parts.iter().any(|v| self.value(*v).rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|v| self.value(*v).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in parts {
                out.extend_from_slice(self.value(*v).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], out)?;
        self.push(out, Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.rows() {
            return Err(Error::shape("slice_rows", format!("{start}+{len} > {}", t.rows())));
        }
        let out = t.slice_rows(start, len);
        self.push(out, Op::SliceRows { x, start }, &[x], "slice_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        if start + len > c {
            return Err(Error::shape("slice_cols", format!("{start}+{len} > {c}")));
        }
        let rows = t.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let out = Tensor::new(vec![rows, len], out)?;
        self.push(out, Op::SliceCols { x, start }, &[x], "slice_cols")
    }

    /// Stacks `window` consecutive rows into one, stepping by `stride`.
    /// Output row i is rows `i·stride .. i·stride + window` concatenated.
    pub fn unfold_rows(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let (n, d) = self.mat(x, "unfold_rows")?;
        if window == 0 || stride == 0 || n < window {
            return Err(Error::shape("unfold_rows", format!("{n} rows, window {window}, stride {stride}")));
        }
        let m = (n - window) / stride + 1;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * window * d);
        for i in 0..m {
            out.extend_from_slice(&src[i * stride * d..(i * stride + window) * d]);
        }
        let out = Tensor::new(vec![m, window * d], out)?;
        self.push(out, Op::Unfold { x, window, stride }, &[x], "unfold_rows")
    }

    /// Output element i is the flat element `idx[i]` of `x`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.len()) {
            return Err(Error::shape("gather", format!("index {bad} >= {}", t.len())));
        }
        let data = idx.iter().map(|&i| t.data()[i]).collect();
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::Gather { x, idx }, &[x], "gather")
    }

    /// Replaces disallowed entries with the mask sentinel.
    pub fn mask_fill(&mut self, x: Var, allow: &[bool]) -> Result<Var> {
        let t = self.value(x);
        if allow.len() != t.len() {
            return Err(Error::shape("mask_fill", format!("mask {} vs {} entries", allow.len(), t.len())));
        }
        let data = t
            .data()
            .iter()
            .zip(allow)
            .map(|(&v, &ok)| if ok { v } else { MASK_SENTINEL })
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, Op::MaskFill { x, allow: allow.to_vec() }, &[x], "mask_fill")
    }

    /// Every pairing of rows: output row `i·B + j` is `a[i] + b[j]`.
    pub fn pair_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, d) = self.mat(a, "pair_sum")?;
        let (nb, d2) = self.mat(b, "pair_sum")?;
        if d != d2 {
            return Err(Error::shape("pair_sum", format!("{d} vs {d2} columns")));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(na * nb * d);
        for i in 0..na {
            let ra = ta.row(i);
            for j in 0..nb {
                out.extend(ra.iter().zip(tb.row(j)).map(|(x, y)| x + y));
            }
        }
        let out = Tensor::new(vec![na * nb, d], out)?;
        self.push(out, Op::PairSum { a, b }, &[a, b], "pair_sum")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x], "sum")
    }

    /// Records a scalar computed outside the tape together with its gradient
    /// with respect to `input`.
    pub fn precomputed_scalar(&mut self, input: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(input).len() {
            return Err(Error::shape("precomputed_scalar", "gradient length"));
        }
        self.push(Tensor::scalar(value), Op::Precomputed { input, grad }, &[input], "precomputed_scalar")
    }

    // ---- backward -------------------------------------------------------

    /// Accumulates d(root)/d(node) for every node reachable from the scalar
    /// `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward", "root must be a scalar"));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of every bound parameter, indexed by [`ParamId`].
    pub fn param_grads(&self) -> Vec<Option<Vec<f64>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| self.grad(v).map(<[f64]>::to_vec)))
            .collect()
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let Tape { nodes, grads, .. } = self;
        let val = |v: &Var| -> &Tensor { &nodes[v.0].value };
        // Gradient buffer of an input, or None when it needs no gradient.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    let n = nodes[v.0].value.len();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
                } else {
                    None
                }
            }};
        }
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(a).rows(), val(a).cols());
                let n = val(b).cols();
                if let Some(ga) = acc!(*a) {
                    gemm_nt(g, val(b).data(), ga, m, n, k);
                }
                if let Some(gb) = acc!(*b) {
                    gemm_tn(val(a).data(), g, gb, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (val(a).rows(), val(a).cols());
                let n = val(b).rows();
                if let Some(ga) = acc!(*a) {
                    gemm_nn(g, val(b).data(), ga, m, n, k);
                }
                if let Some(gb) = acc!(*b) {
                    gemm_tn(g, val(a).data(), gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = acc!(v) {
                        add_into(ga, g);
                    }
                }
            }
            Op::AddRow(a, b) => {
                if let Some(ga) = acc!(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = acc!(*b) {
                    let c = gb.len();
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = acc!(*a) {
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(val(b).data()) {
                        *o += gi * bi;
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(val(a).data()) {
                        *o += gi * ai;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = acc!(*a) {
                    for (o, gi) in ga.iter_mut().zip(g) {
                        *o += gi * c;
                    }
                }
            }
            Op::Tanh(a) | Op::Sigmoid(a) | Op::Silu(a) | Op::Relu(a) => {
                let (x, y) = (val(a).data(), out.data());
                let d: fn(f64, f64) -> f64 = match &nodes[i].op {
                    Op::Tanh(_) => |_, y| 1.0 - y * y,
                    Op::Sigmoid(_) => |_, y| y * (1.0 - y),
                    Op::Silu(_) => |x, _| {
                        let s = sigmoid(x);
                        s + x * s * (1.0 - s)
                    },
                    _ => |x, _| if x > 0.0 { 1.0 } else { 0.0 },
                };
                if let Some(ga) = acc!(*a) {
                    for j in 0..ga.len() {
                        ga[j] += g[j] * d(x[j], y[j]);
                    }
                }
            }
            Op::Softmax(a) => {
                let c = out.cols();
                if let Some(ga) = acc!(*a) {
                    for ((gr, yr), or) in g.chunks(c).zip(out.data().chunks(c)).zip(ga.chunks_mut(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            or[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let c = out.cols();
                if let Some(ga) = acc!(*a) {
                    for ((gr, yr), or) in g.chunks(c).zip(out.data().chunks(c)).zip(ga.chunks_mut(c)) {
                        let s: f64 = gr.iter().sum();
                        for j in 0..c {
                            or[j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = val(x).cols();
                if let Some(gg) = acc!(*gain) {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = acc!(*bias) {
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                }
                let gv = val(gain).data();
                if let Some(gx) = acc!(*x) {
                    let mut dh = vec![0.0; d];
                    for (r, ((gr, hr), or)) in
                        g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate()
                    {
                        for j in 0..d {
                            dh[j] = gr[j] * gv[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dhh = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            or[j] += inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = val(table).cols();
                if let Some(gt) = acc!(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::DepthwiseConv { x, kernel, bias } => {
                let d = val(x).cols();
                let k = val(kernel).rows();
                let l = g.len() / d;
                if let Some(gx) = acc!(*x) {
                    let kv = val(kernel).data();
                    for t in 0..l {
                        for j in 0..k {
                            for c in 0..d {
                                gx[(t + j) * d + c] += g[t * d + c] * kv[j * d + c];
                            }
                        }
                    }
                }
                if let Some(gk) = acc!(*kernel) {
                    let xv = val(x).data();
                    for t in 0..l {
                        for j in 0..k {
                            for c in 0..d {
                                gk[j * d + c] += g[t * d + c] * xv[(t + j) * d + c];
                            }
                        }
                    }
                }
                if let Some(gb) = acc!(*bias) {
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for v in parts {
                    let n = val(v).len();
                    if let Some(gv) = acc!(*v) {
                        add_into(gv, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut col = 0;
                for v in parts {
                    let c = val(v).cols();
                    if let Some(gv) = acc!(*v) {
                        for (r, or) in gv.chunks_mut(c).enumerate() {
                            add_into(or, &g[r * total + col..r * total + col + c]);
                        }
                    }
                    col += c;
                }
            }
            Op::SliceRows { x, start } => {
                let c = val(x).cols();
                if let Some(gx) = acc!(*x) {
                    add_into(&mut gx[start * c..start * c + g.len()], g);
                }
            }
            Op::SliceCols { x, start } => {
                let c = val(x).cols();
                let len = out.cols();
                if let Some(gx) = acc!(*x) {
                    for (r, gr) in g.chunks(len).enumerate() {
                        add_into(&mut gx[r * c + start..r * c + start + len], gr);
                    }
                }
            }
            Op::Unfold { x, window, stride } => {
                let d = val(x).cols();
                let w = window * d;
                if let Some(gx) = acc!(*x) {
                    for (r, gr) in g.chunks(w).enumerate() {
                        let base = r * stride * d;
                        add_into(&mut gx[base..base + w], gr);
                    }
                }
            }
            Op::Gather { x, idx } => {
                if let Some(gx) = acc!(*x) {
                    for (gi, &j) in g.iter().zip(idx) {
                        gx[j] += gi;
                    }
                }
            }
            Op::MaskFill { x, allow } => {
                if let Some(gx) = acc!(*x) {
                    for ((o, gi), ok) in gx.iter_mut().zip(g).zip(allow) {
                        if *ok {
                            *o += gi;
                        }
                    }
                }
            }
            Op::PairSum { a, b } => {
                let d = val(a).cols();
                let nb = val(b).rows();
                if let Some(ga) = acc!(*a) {
                    for (r, gr) in g.chunks(d).enumerate() {
                        let ia = r / nb;
                        add_into(&mut ga[ia * d..(ia + 1) * d], gr);
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for (r, gr) in g.chunks(d).enumerate() {
                        let ib = r % nb;
                        add_into(&mut gb[ib * d..(ib + 1) * d], gr);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = acc!(*x) {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Precomputed { input, grad } => {
                if let Some(gx) = acc!(*input) {
                    for (o, d) in gx.iter_mut().zip(grad) {
                        *o += g[0] * d;
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
