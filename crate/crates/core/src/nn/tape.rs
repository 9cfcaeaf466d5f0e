//! Reverse-mode automatic differentiation over dense f64 matrices.
//!
//! A `Tape` records every operation of one forward pass as a node; calling
//! [`Tape::backward`] on a scalar node walks the recording in reverse and
//! accumulates gradients into every parameter leaf. Graphs are rebuilt per
//! forward pass, so control flow (masking, per-sample sequence lengths,
//! head splitting) is plain Rust.
//!
//! Everything is an `Array2<f64>`; vectors are `[1, n]` and scalars `[1, 1]`.

use crate::error::{Error, Result};
use ndarray::{Array2, Axis, s};
use std::collections::BTreeMap;
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `[m,n] + [1,n]`, the bias-add pattern.
    AddRowVec(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Tanh(usize),
    /// Elementwise x^p for constant p (inputs must be non-negative when p
    /// is fractional; used with clamped probabilities).
    PowConst(usize, f64),
    Ln(usize),
    ClampMin(usize, f64),
    Transpose(usize),
    /// Row-major reinterpretation to a new (rows, cols) of equal size.
    Reshape(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize, usize),
    SliceRows(usize, usize, usize),
    SumAll(usize),
    /// Mean over the first `valid` rows, producing `[1, n]`.
    MeanRowsValid(usize, usize),
    /// Row-wise softmax restricted to `mask==true` entries; masked entries
    /// output exactly 0.
    SoftmaxRowsMasked(usize, Rc<Array2<bool>>),
    /// Per-row layer normalization with learnable gain/shift `[1, n]`.
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    /// Multiply each consecutive `block_rows`-row block of x by the same
    /// constant square matrix (batched graph aggregation).
    BlockMatmulConst { a: Rc<Array2<f64>>, x: usize },
    /// Gather rows of a parameter table by constant indices.
    EmbedRows { table: usize, ids: Rc<Vec<usize>> },
    /// `[m,1] -> [m,k]` by column repetition.
    BroadcastCols(usize),
    /// `[1,n] -> [k,n]` by row repetition.
    BroadcastRows(usize),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
    /// Parameter name when this node is a named leaf.
    param_name: Option<String>,
}

/// One forward recording plus (after `backward`) its gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Array2<f64>>>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param_name: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let v = self.value(id);
        if v.shape() != [1, 1] {
            return Err(Error::validation(format!(
                "expected scalar node, got shape {:?}",
                v.shape()
            )));
        }
        Ok(v[[0, 0]])
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        let s = self.nodes[id.0].value.shape();
        (s[0], s[1])
    }

    /// A constant leaf: carries data, never receives gradient.
    pub fn input(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A named trainable leaf. Gradients for all params are collected by
    /// [`Tape::param_grads`] after `backward`.
    pub fn param(&mut self, name: &str, value: Array2<f64>) -> NodeId {
        let id = self.push(value, Op::Leaf, true);
        self.nodes[id.0].param_name = Some(name.to_string());
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(Error::validation(format!(
                "matmul shape mismatch: [{ar},{ac}] x [{br},{bc}]"
            )));
        }
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let req = self.requires(a.0) || self.requires(b.0);
        Ok(self.push(value, Op::Matmul(a.0, b.0), req))
    }

    fn binary_same_shape(&mut self, a: NodeId, b: NodeId, name: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::validation(format!(
                "{name} shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add")?;
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let req = self.requires(a.0) || self.requires(b.0);
        Ok(self.push(value, Op::Add(a.0, b.0), req))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub")?;
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let req = self.requires(a.0) || self.requires(b.0);
        Ok(self.push(value, Op::Sub(a.0, b.0), req))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul")?;
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let req = self.requires(a.0) || self.requires(b.0);
        Ok(self.push(value, Op::Mul(a.0, b.0), req))
    }

    pub fn add_row_vec(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (_, xc) = self.shape(x);
        let (br, bc) = self.shape(bias);
        if br != 1 || bc != xc {
            return Err(Error::validation(format!(
                "bias must be [1,{xc}], got [{br},{bc}]"
            )));
        }
        let value = &self.nodes[x.0].value + &self.nodes[bias.0].value;
        let req = self.requires(x.0) || self.requires(bias.0);
        Ok(self.push(value, Op::AddRowVec(x.0, bias.0), req))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = self.nodes[x.0].value.mapv(|v| v * c);
        let req = self.requires(x.0);
        self.push(value, Op::Scale(x.0, c), req)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = self.nodes[x.0].value.mapv(|v| v + c);
        let req = self.requires(x.0);
        self.push(value, Op::AddScalar(x.0), req)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.mapv(|v| v.max(0.0));
        let req = self.requires(x.0);
        self.push(value, Op::Relu(x.0), req)
    }

    pub fn leaky_relu(&mut self, x: NodeId, alpha: f64) -> NodeId {
        let value = self.nodes[x.0].value.mapv(|v| if v > 0.0 { v } else { alpha * v });
        let req = self.requires(x.0);
        self.push(value, Op::LeakyRelu(x.0, alpha), req)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.mapv(f64::tanh);
        let req = self.requires(x.0);
        self.push(value, Op::Tanh(x.0), req)
    }

    pub fn pow_const(&mut self, x: NodeId, p: f64) -> NodeId {
        let value = self.nodes[x.0].value.mapv(|v| v.powf(p));
        let req = self.requires(x.0);
        self.push(value, Op::PowConst(x.0, p), req)
    }

    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        if self.nodes[x.0].value.iter().any(|&v| v <= 0.0) {
            return Err(Error::validation(
                "ln requires strictly positive inputs (clamp first)".to_string(),
            ));
        }
        let value = self.nodes[x.0].value.mapv(f64::ln);
        let req = self.requires(x.0);
        Ok(self.push(value, Op::Ln(x.0), req))
    }

    pub fn clamp_min(&mut self, x: NodeId, min: f64) -> NodeId {
        let value = self.nodes[x.0].value.mapv(|v| v.max(min));
        let req = self.requires(x.0);
        self.push(value, Op::ClampMin(x.0, min), req)
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.t().to_owned();
        let req = self.requires(x.0);
        self.push(value, Op::Transpose(x.0), req)
    }

    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if r * c != rows * cols {
            return Err(Error::validation(format!(
                "cannot reshape [{r},{c}] into [{rows},{cols}]"
            )));
        }
        let value = Array2::from_shape_vec(
            (rows, cols),
            self.nodes[x.0].value.iter().copied().collect(),
        )
        .expect("element count validated");
        let req = self.requires(x.0);
        Ok(self.push(value, Op::Reshape(x.0), req))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::validation("concat of zero parts".to_string()));
        }
        let rows = self.shape(parts[0]).0;
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::validation("concat_cols row mismatch".to_string()));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p.0].value.view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("validated shapes");
        let req = parts.iter().any(|&p| self.requires(p.0));
        Ok(self.push(value, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), req))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::validation("concat of zero parts".to_string()));
        }
        let cols = self.shape(parts[0]).1;
        if parts.iter().any(|&p| self.shape(p).1 != cols) {
            return Err(Error::validation("concat_rows column mismatch".to_string()));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p.0].value.view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("validated shapes");
        let req = parts.iter().any(|&p| self.requires(p.0));
        Ok(self.push(value, Op::ConcatRows(parts.iter().map(|p| p.0).collect()), req))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (r, _) = self.shape(x);
        if start >= end || end > r {
            return Err(Error::validation(format!(
                "slice_rows {start}..{end} out of range for height {r}"
            )));
        }
        let value = self.nodes[x.0].value.slice(s![start..end, ..]).to_owned();
        let req = self.requires(x.0);
        Ok(self.push(value, Op::SliceRows(x.0, start, end), req))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (_, c) = self.shape(x);
        if start >= end || end > c {
            return Err(Error::validation(format!(
                "slice_cols {start}..{end} out of range for width {c}"
            )));
        }
        let value = self.nodes[x.0].value.slice(s![.., start..end]).to_owned();
        let req = self.requires(x.0);
        Ok(self.push(value, Op::SliceCols(x.0, start, end), req))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let total = self.nodes[x.0].value.sum();
        let req = self.requires(x.0);
        self.push(Array2::from_elem((1, 1), total), Op::SumAll(x.0), req)
    }

    pub fn mean_rows_valid(&mut self, x: NodeId, valid: usize) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if valid == 0 || valid > r {
            return Err(Error::validation(format!(
                "mean over {valid} rows invalid for {r}-row matrix"
            )));
        }
        let mut acc = Array2::zeros((1, c));
        for i in 0..valid {
            let row = self.nodes[x.0].value.row(i);
            acc.row_mut(0).zip_mut_with(&row, |a, &b| *a += b);
        }
        acc.mapv_inplace(|v| v / valid as f64);
        let req = self.requires(x.0);
        Ok(self.push(acc, Op::MeanRowsValid(x.0, valid), req))
    }

    /// Softmax per row over entries where `mask` is true; masked-out
    /// entries are exactly zero. Rows with an all-false mask are an error.
    pub fn softmax_rows_masked(&mut self, x: NodeId, mask: Rc<Array2<bool>>) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if mask.shape() != [r, c] {
            return Err(Error::validation(format!(
                "softmax mask shape {:?} != input [{r},{c}]",
                mask.shape()
            )));
        }
        let xv = &self.nodes[x.0].value;
        let mut out = Array2::zeros((r, c));
        for i in 0..r {
            let mut max = f64::NEG_INFINITY;
            for j in 0..c {
                if mask[[i, j]] {
                    max = max.max(xv[[i, j]]);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::validation(format!("softmax row {i} fully masked")));
            }
            let mut denom = 0.0;
            for j in 0..c {
                if mask[[i, j]] {
                    let e = (xv[[i, j]] - max).exp();
                    out[[i, j]] = e;
                    denom += e;
                }
            }
            for j in 0..c {
                out[[i, j]] /= denom;
            }
        }
        let req = self.requires(x.0);
        Ok(self.push(out, Op::SoftmaxRowsMasked(x.0, mask), req))
    }

    /// Row softmax with nothing masked.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        self.softmax_rows_masked(x, Rc::new(Array2::from_elem((r, c), true)))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (_, c) = self.shape(x);
        for (id, label) in [(gamma, "gamma"), (beta, "beta")] {
            if self.shape(id) != (1, c) {
                return Err(Error::validation(format!(
                    "layer_norm {label} must be [1,{c}], got {:?}",
                    self.shape(id)
                )));
            }
        }
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let mut out = Array2::zeros(xv.raw_dim());
        for (i, row) in xv.axis_iter(Axis(0)).enumerate() {
            let mean = row.mean().unwrap();
            let var = row.mapv(|v| (v - mean).powi(2)).mean().unwrap();
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out[[i, j]] = g[[0, j]] * (row[j] - mean) * inv + b[[0, j]];
            }
        }
        let req = self.requires(x.0) || self.requires(gamma.0) || self.requires(beta.0);
        Ok(self.push(out, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, eps }, req))
    }

    /// Multiply every consecutive `a.nrows()`-row block of `x` by `a`.
    /// `x` must have `k * a.nrows()` rows for integer `k`.
    pub fn block_matmul_const(&mut self, a: Rc<Array2<f64>>, x: NodeId) -> Result<NodeId> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::validation("block matrix must be square".to_string()));
        }
        let (rows, cols) = self.shape(x);
        if n == 0 || rows % n != 0 {
            return Err(Error::validation(format!(
                "{rows} rows not divisible into {n}-row blocks"
            )));
        }
        let xv = &self.nodes[x.0].value;
        let mut out = Array2::zeros((rows, cols));
        for blk in 0..rows / n {
            let r = blk * n..(blk + 1) * n;
            let prod = a.dot(&xv.slice(s![r.clone(), ..]));
            out.slice_mut(s![r, ..]).assign(&prod);
        }
        let req = self.requires(x.0);
        Ok(self.push(out, Op::BlockMatmulConst { a, x: x.0 }, req))
    }

    pub fn embed_rows(&mut self, table: NodeId, ids: Rc<Vec<usize>>) -> Result<NodeId> {
        let (v, e) = self.shape(table);
        if ids.is_empty() {
            return Err(Error::validation("embed_rows with no indices".to_string()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::validation(format!(
                "token id {bad} out of vocabulary range {v}"
            )));
        }
        let tv = &self.nodes[table.0].value;
        let mut out = Array2::zeros((ids.len(), e));
        for (row, &id) in ids.iter().enumerate() {
            out.row_mut(row).assign(&tv.row(id));
        }
        let req = self.requires(table.0);
        Ok(self.push(out, Op::EmbedRows { table: table.0, ids }, req))
    }

    pub fn broadcast_cols(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if c != 1 || k == 0 {
            return Err(Error::validation(format!(
                "broadcast_cols needs a [m,1] input and k>0, got [{r},{c}] k={k}"
            )));
        }
        let xv = &self.nodes[x.0].value;
        let value = Array2::from_shape_fn((r, k), |(i, _)| xv[[i, 0]]);
        let req = self.requires(x.0);
        Ok(self.push(value, Op::BroadcastCols(x.0), req))
    }

    pub fn broadcast_rows(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if r != 1 || k == 0 {
            return Err(Error::validation(format!(
                "broadcast_rows needs a [1,n] input and k>0, got [{r},{c}] k={k}"
            )));
        }
        let xv = &self.nodes[x.0].value;
        let value = Array2::from_shape_fn((k, c), |(_, j)| xv[[0, j]]);
        let req = self.requires(x.0);
        Ok(self.push(value, Op::BroadcastRows(x.0), req))
    }

    fn accumulate(grads: &mut [Option<Array2<f64>>], id: usize, delta: Array2<f64>) {
        match &mut grads[id] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    /// Backpropagate from a scalar node, filling parameter gradients.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).shape() != [1, 1] {
            return Err(Error::validation(
                "backward root must be a scalar node".to_string(),
            ));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::ones((1, 1)));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match self.nodes[i].op.clone() {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Matmul(a, b) => {
                    if self.requires(a) {
                        let delta = g.dot(&self.nodes[b].value.t());
                        Self::accumulate(&mut grads, a, delta);
                    }
                    if self.requires(b) {
                        let delta = self.nodes[a].value.t().dot(&g);
                        Self::accumulate(&mut grads, b, delta);
                    }
                }
                Op::Add(a, b) => {
                    if self.requires(a) {
                        Self::accumulate(&mut grads, a, g.clone());
                    }
                    if self.requires(b) {
                        Self::accumulate(&mut grads, b, g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if self.requires(a) {
                        Self::accumulate(&mut grads, a, g.clone());
                    }
                    if self.requires(b) {
                        Self::accumulate(&mut grads, b, g.mapv(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    if self.requires(a) {
                        Self::accumulate(&mut grads, a, &g * &self.nodes[b].value);
                    }
                    if self.requires(b) {
                        Self::accumulate(&mut grads, b, &g * &self.nodes[a].value);
                    }
                }
                Op::AddRowVec(x, bias) => {
                    if self.requires(x) {
                        Self::accumulate(&mut grads, x, g.clone());
                    }
                    if self.requires(bias) {
                        let summed = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        Self::accumulate(&mut grads, bias, summed);
                    }
                }
                Op::Scale(x, c) => {
                    Self::accumulate(&mut grads, x, g.mapv(|v| v * c));
                }
                Op::AddScalar(x) => {
                    Self::accumulate(&mut grads, x, g);
                }
                Op::Relu(x) => {
                    let gate = self.nodes[x].value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    Self::accumulate(&mut grads, x, &g * &gate);
                }
                Op::LeakyRelu(x, alpha) => {
                    let gate = self.nodes[x].value.mapv(|v| if v > 0.0 { 1.0 } else { alpha });
                    Self::accumulate(&mut grads, x, &g * &gate);
                }
                Op::Tanh(x) => {
                    let y = &self.nodes[i].value;
                    let gate = y.mapv(|v| 1.0 - v * v);
                    Self::accumulate(&mut grads, x, &g * &gate);
                }
                Op::PowConst(x, p) => {
                    if p != 0.0 {
                        let gate = self.nodes[x].value.mapv(|v| p * v.powf(p - 1.0));
                        Self::accumulate(&mut grads, x, &g * &gate);
                    }
                }
                Op::Ln(x) => {
                    let gate = self.nodes[x].value.mapv(|v| 1.0 / v);
                    Self::accumulate(&mut grads, x, &g * &gate);
                }
                Op::ClampMin(x, min) => {
                    let gate = self.nodes[x].value.mapv(|v| if v > min { 1.0 } else { 0.0 });
                    Self::accumulate(&mut grads, x, &g * &gate);
                }
                Op::Transpose(x) => {
                    Self::accumulate(&mut grads, x, g.t().to_owned());
                }
                Op::Reshape(x) => {
                    let dim = self.nodes[x].value.raw_dim();
                    let delta = Array2::from_shape_vec(dim, g.iter().copied().collect())
                        .expect("forward validated element count");
                    Self::accumulate(&mut grads, x, delta);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = self.nodes[p].value.nrows();
                        if self.requires(p) {
                            let delta = g.slice(s![start..start + h, ..]).to_owned();
                            Self::accumulate(&mut grads, p, delta);
                        }
                        start += h;
                    }
                }
                Op::SliceRows(x, start, end) => {
                    let dim = self.nodes[x].value.raw_dim();
                    let mut delta = Array2::zeros(dim);
                    delta.slice_mut(s![start..end, ..]).assign(&g);
                    Self::accumulate(&mut grads, x, delta);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.nodes[p].value.ncols();
                        if self.requires(p) {
                            let delta = g.slice(s![.., start..start + w]).to_owned();
                            Self::accumulate(&mut grads, p, delta);
                        }
                        start += w;
                    }
                }
                Op::SliceCols(x, start, end) => {
                    let (r, c) = {
                        let s = self.nodes[x].value.shape();
                        (s[0], s[1])
                    };
                    let mut delta = Array2::zeros((r, c));
                    delta.slice_mut(s![.., start..end]).assign(&g);
                    Self::accumulate(&mut grads, x, delta);
                }
                Op::SumAll(x) => {
                    let shape = self.nodes[x].value.raw_dim();
                    Self::accumulate(&mut grads, x, Array2::from_elem(shape, g[[0, 0]]));
                }
                Op::MeanRowsValid(x, valid) => {
                    let shape = self.nodes[x].value.raw_dim();
                    let mut delta = Array2::zeros(shape);
                    for r in 0..valid {
                        delta.row_mut(r).assign(&g.row(0).mapv(|v| v / valid as f64));
                    }
                    Self::accumulate(&mut grads, x, delta);
                }
                Op::SoftmaxRowsMasked(x, mask) => {
                    let y = &self.nodes[i].value;
                    let (r, c) = (y.nrows(), y.ncols());
                    let mut delta = Array2::zeros((r, c));
                    for row in 0..r {
                        let mut dot = 0.0;
                        for col in 0..c {
                            if mask[[row, col]] {
                                dot += g[[row, col]] * y[[row, col]];
                            }
                        }
                        for col in 0..c {
                            if mask[[row, col]] {
                                delta[[row, col]] = y[[row, col]] * (g[[row, col]] - dot);
                            }
                        }
                    }
                    Self::accumulate(&mut grads, x, delta);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let xv = &self.nodes[x].value;
                    let gv = &self.nodes[gamma].value;
                    let (r, c) = (xv.nrows(), xv.ncols());
                    let mut dx = Array2::zeros((r, c));
                    let mut dgamma = Array2::zeros((1, c));
                    let mut dbeta = Array2::zeros((1, c));
                    for row in 0..r {
                        let xr = xv.row(row);
                        let mean = xr.mean().unwrap();
                        let var = xr.mapv(|v| (v - mean).powi(2)).mean().unwrap();
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = xr.iter().map(|&v| (v - mean) * inv).collect();
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        let mut dxhat = vec![0.0; c];
                        for col in 0..c {
                            let gval = g[[row, col]];
                            dgamma[[0, col]] += gval * xhat[col];
                            dbeta[[0, col]] += gval;
                            dxhat[col] = gval * gv[[0, col]];
                            mean_dxhat += dxhat[col];
                            mean_dxhat_xhat += dxhat[col] * xhat[col];
                        }
                        mean_dxhat /= c as f64;
                        mean_dxhat_xhat /= c as f64;
                        for col in 0..c {
                            dx[[row, col]] =
                                inv * (dxhat[col] - mean_dxhat - xhat[col] * mean_dxhat_xhat);
                        }
                    }
                    if self.requires(x) {
                        Self::accumulate(&mut grads, x, dx);
                    }
                    if self.requires(gamma) {
                        Self::accumulate(&mut grads, gamma, dgamma);
                    }
                    if self.requires(beta) {
                        Self::accumulate(&mut grads, beta, dbeta);
                    }
                }
                Op::BlockMatmulConst { a, x } => {
                    let n = a.nrows();
                    let (rows, cols) = {
                        let s = self.nodes[x].value.shape();
                        (s[0], s[1])
                    };
                    let at = a.t();
                    let mut delta = Array2::zeros((rows, cols));
                    for blk in 0..rows / n {
                        let r = blk * n..(blk + 1) * n;
                        let d = at.dot(&g.slice(s![r.clone(), ..]));
                        delta.slice_mut(s![r, ..]).assign(&d);
                    }
                    Self::accumulate(&mut grads, x, delta);
                }
                Op::EmbedRows { table, ids } => {
                    let shape = self.nodes[table].value.raw_dim();
                    let mut delta = Array2::zeros(shape);
                    for (row, &id) in ids.iter().enumerate() {
                        let mut target = delta.row_mut(id);
                        target.zip_mut_with(&g.row(row), |a, &b| *a += b);
                    }
                    Self::accumulate(&mut grads, table, delta);
                }
                Op::BroadcastCols(x) => {
                    let summed = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    Self::accumulate(&mut grads, x, summed);
                }
                Op::BroadcastRows(x) => {
                    let summed = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    Self::accumulate(&mut grads, x, summed);
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of a node after `backward` (None for constants or nodes
    /// the loss does not depend on).
    pub fn grad(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// All named-parameter gradients, zero-filled for parameters the loss
    /// did not touch. A parameter bound more than once (weight sharing)
    /// accumulates across its bindings.
    pub fn param_grads(&self) -> BTreeMap<String, Array2<f64>> {
        let mut out: BTreeMap<String, Array2<f64>> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(name) = &node.param_name {
                let g = self
                    .grads
                    .get(i)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Array2::zeros(node.value.raw_dim()));
                match out.get_mut(name) {
                    Some(existing) => *existing += &g,
                    None => {
                        out.insert(name.clone(), g);
                    }
                }
            }
        }
        out
    }
}
