//! Computation tape: records forward operations, replays them in reverse.
//!
//! Nodes are appended in execution order, so parents always precede children
//! and one reverse sweep visits every node exactly once.

use super::{ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Transpose { a: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Neg { a: usize },
    Scale { a: usize, c: f64 },
    AddRowBroadcast { a: usize, row: usize },
    Sum { a: usize },
    MeanRows { a: usize },
    SoftmaxRows { a: usize },
    LogSoftmaxRows { a: usize },
    LogSumExpAll { a: usize },
    LayerNorm { a: usize, gain: usize, bias: usize },
    Tanh { a: usize },
    Sigmoid { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Softplus { a: usize },
    ClampMin { a: usize, c: f64 },
    ConcatRows { parts: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    GatherRows { a: usize, idx: Vec<usize> },
}

struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
    /// Cached forward intermediates needed by backward (e.g. layer-norm stats).
    aux: Vec<f64>,
}

const LAYER_NORM_EPS: f64 = 1e-5;

/// Reverse-mode tape over 2-D tensors.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
    bindings: BTreeMap<ParamId, usize>,
    visit_count: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            bindings: BTreeMap::new(),
            visit_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    /// Gradient of the last backward pass at `id` (zeros if untouched).
    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.grads[id.0]
    }

    /// Nodes processed by the most recent backward sweep.
    pub fn last_visit_count(&self) -> usize {
        self.visit_count
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, op: Op, requires_grad: bool) -> NodeId {
        self.push_aux(rows, cols, data, op, requires_grad, Vec::new())
    }

    fn push_aux(
        &mut self,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        op: Op,
        requires_grad: bool,
        aux: Vec<f64>,
    ) -> NodeId {
        debug_assert_eq!(rows * cols, data.len());
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite forward value"
        );
        self.nodes.push(Node {
            rows,
            cols,
            data,
            op,
            requires_grad,
            aux,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: usize) -> &Node {
        &self.nodes[id]
    }

    fn dims(&self, id: NodeId) -> Vec<usize> {
        vec![self.nodes[id.0].rows, self.nodes[id.0].cols]
    }

    // ---- leaves -------------------------------------------------------

    /// Registers an input tensor as a leaf. Gradient is tracked when the
    /// tensor requires it, but nothing is written back to the tensor.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(t.rows(), t.cols(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    /// Registers a parameter as a leaf bound to its [`ParamSet`] slot;
    /// repeated registration returns the same node. Frozen parameters
    /// (requires_grad off) become plain constants.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> NodeId {
        if let Some(&n) = self.bindings.get(&id) {
            return NodeId(n);
        }
        let t = params.get(id);
        let node = self.push(t.rows(), t.cols(), t.data.clone(), Op::Leaf, t.requires_grad);
        self.bindings.insert(id, node.0);
        node
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<NodeId> {
        if rows * cols != data.len() {
            return Err(Error::Contract(format!(
                "constant shape {rows}x{cols} does not match {} values",
                data.len()
            )));
        }
        Ok(self.push(rows, cols, data, Op::Leaf, false))
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.push(1, 1, vec![v], Op::Leaf, false)
    }

    // ---- ops ----------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::DimMismatch {
                op: "matmul",
                left: self.dims(a),
                right: self.dims(b),
            });
        }
        let av = &self.nodes[a.0].data;
        let bv = &self.nodes[b.0].data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(m, n, out, Op::Matmul { a: a.0, b: b.0 }, rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let av = &self.nodes[a.0].data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(n, m, out, Op::Transpose { a: a.0 }, rg)
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        if self.shape(b) != (m, n) {
            return Err(Error::DimMismatch {
                op: op_name,
                left: self.dims(a),
                right: self.dims(b),
            });
        }
        let out = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(m, n, out, op, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let out = self.nodes[a.0].data.iter().map(|v| -v).collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(m, n, out, Op::Neg { a: a.0 }, rg)
    }

    /// Multiplication by a compile-time constant.
    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let (m, n) = self.shape(a);
        let out = self.nodes[a.0].data.iter().map(|v| c * v).collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(m, n, out, Op::Scale { a: a.0, c }, rg)
    }

    /// Adds a 1-by-d row vector to every row of an m-by-d matrix.
    pub fn add_row_broadcast(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, d) = self.shape(a);
        if self.shape(row) != (1, d) {
            return Err(Error::DimMismatch {
                op: "add_row_broadcast",
                left: self.dims(a),
                right: self.dims(row),
            });
        }
        let rv = self.nodes[row.0].data.clone();
        let out = self.nodes[a.0]
            .data
            .chunks(d)
            .flat_map(|r| r.iter().zip(&rv).map(|(&x, &y)| x + y).collect::<Vec<_>>())
            .collect();
        let rg = self.nodes[a.0].requires_grad || self.nodes[row.0].requires_grad;
        Ok(self.push(m, d, out, Op::AddRowBroadcast { a: a.0, row: row.0 }, rg))
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].data.iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(1, 1, vec![s], Op::Sum { a: a.0 }, rg)
    }

    /// Column means over the rows: m-by-d -> 1-by-d.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let (m, d) = self.shape(a);
        let mut out = vec![0.0; d];
        for r in self.nodes[a.0].data.chunks(d) {
            for (o, &v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= m as f64);
        let rg = self.nodes[a.0].requires_grad;
        self.push(1, d, out, Op::MeanRows { a: a.0 }, rg)
    }

    /// Row-wise softmax, stabilized by max subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (m, d) = self.shape(a);
        let mut out = vec![0.0; m * d];
        for (orow, row) in out.chunks_mut(d).zip(self.nodes[a.0].data.chunks(d)) {
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - mx).exp();
                z += *o;
            }
            orow.iter_mut().for_each(|v| *v /= z);
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(m, d, out, Op::SoftmaxRows { a: a.0 }, rg)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (m, d) = self.shape(a);
        let mut out = vec![0.0; m * d];
        for (orow, row) in out.chunks_mut(d).zip(self.nodes[a.0].data.chunks(d)) {
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(m, d, out, Op::LogSoftmaxRows { a: a.0 }, rg)
    }

    /// log(sum(exp(x))) over every entry, as a 1x1 node.
    pub fn logsumexp_all(&mut self, a: NodeId) -> NodeId {
        let data = &self.nodes[a.0].data;
        let mx = data.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let s = mx + data.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
        let rg = self.nodes[a.0].requires_grad;
        self.push(1, 1, vec![s], Op::LogSumExpAll { a: a.0 }, rg)
    }

    /// Per-row standardization followed by gain and bias (both 1-by-d).
    pub fn layer_norm(&mut self, a: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, d) = self.shape(a);
        if self.shape(gain) != (1, d) || self.shape(bias) != (1, d) {
            return Err(Error::DimMismatch {
                op: "layer_norm",
                left: self.dims(a),
                right: self.dims(gain),
            });
        }
        let g = self.nodes[gain.0].data.clone();
        let b = self.nodes[bias.0].data.clone();
        let mut out = vec![0.0; m * d];
        // aux stores, per row: inv_std, then the d normalized values
        let mut aux = Vec::with_capacity(m * (d + 1));
        for (orow, row) in out.chunks_mut(d).zip(self.nodes[a.0].data.chunks(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            aux.push(inv_std);
            for (j, (o, &v)) in orow.iter_mut().zip(row).enumerate() {
                let xhat = (v - mean) * inv_std;
                aux.push(xhat);
                *o = g[j] * xhat + b[j];
            }
        }
        let rg = self.nodes[a.0].requires_grad
            || self.nodes[gain.0].requires_grad
            || self.nodes[bias.0].requires_grad;
        Ok(self.push_aux(
            m,
            d,
            out,
            Op::LayerNorm {
                a: a.0,
                gain: gain.0,
                bias: bias.0,
            },
            rg,
            aux,
        ))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let (m, n) = self.shape(a);
        let out = self.nodes[a.0].data.iter().map(|&v| f(v)).collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(m, n, out, op, rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh { a: a.0 })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, sigmoid, Op::Sigmoid { a: a.0 })
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp { a: a.0 })
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(v) = self.nodes[a.0].data.iter().find(|v| **v <= 0.0) {
            return Err(Error::domain("log", format!("non-positive input {v}")));
        }
        Ok(self.unary(a, f64::ln, Op::Log { a: a.0 }))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, softplus, Op::Softplus { a: a.0 })
    }

    /// max(x, c) elementwise against a constant floor.
    pub fn clamp_min(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |v| v.max(c), Op::ClampMin { a: a.0, c })
    }

    /// Stacks blocks of equal width on top of each other.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero parts".into()));
        }
        let (_, d) = self.shape(parts[0]);
        let mut rows = 0;
        let mut data = Vec::new();
        let mut rg = false;
        for &p in parts {
            let (m, w) = self.shape(p);
            if w != d {
                return Err(Error::DimMismatch {
                    op: "concat_rows",
                    left: self.dims(parts[0]),
                    right: self.dims(p),
                });
            }
            rows += m;
            data.extend_from_slice(&self.nodes[p.0].data);
            rg |= self.nodes[p.0].requires_grad;
        }
        Ok(self.push(
            rows,
            d,
            data,
            Op::ConcatRows {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            rg,
        ))
    }

    /// Joins blocks of equal height side by side.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero parts".into()));
        }
        let (m, _) = self.shape(parts[0]);
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p).1).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; m * total];
        let mut rg = false;
        for i in 0..m {
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                let (pm, _) = self.shape(p);
                if pm != m {
                    return Err(Error::DimMismatch {
                        op: "concat_cols",
                        left: self.dims(parts[0]),
                        right: self.dims(p),
                    });
                }
                data[i * total + off..i * total + off + w]
                    .copy_from_slice(&self.nodes[p.0].data[i * w..(i + 1) * w]);
                off += w;
                rg |= self.nodes[p.0].requires_grad;
            }
        }
        Ok(self.push(
            m,
            total,
            data,
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            rg,
        ))
    }

    /// Selects rows by index (indices need not be unique or sorted).
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (m, d) = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Contract(format!(
                "gather_rows index {bad} out of range for {m} rows"
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&self.nodes[a.0].data[i * d..(i + 1) * d]);
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(
            idx.len(),
            d,
            data,
            Op::GatherRows {
                a: a.0,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    // ---- backward -----------------------------------------------------

    /// Reverse pass populating gradients for every `requires_grad` parameter
    /// bound to this tape. Parameter gradients accumulate across calls; the
    /// caller owns zeroing.
    pub fn backward(&mut self, loss: NodeId, params: &mut ParamSet) -> Result<()> {
        self.backward_values(loss)?;
        for (&pid, &node) in self.bindings.clone().iter() {
            if !params.get(pid).requires_grad {
                continue;
            }
            let g = self.grads[node].clone();
            params.get_mut(pid).accumulate_grad(&g);
        }
        Ok(())
    }

    /// Reverse pass that only fills per-node gradients (readable via
    /// [`Tape::grad`]); used for gradients with respect to non-parameter
    /// leaves.
    pub fn backward_values(&mut self, loss: NodeId) -> Result<()> {
        let ln = &self.nodes[loss.0];
        if ln.rows * ln.cols != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got {}x{}",
                ln.rows, ln.cols
            )));
        }
        self.grads = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.data.len()])
            .collect();
        self.grads[loss.0][0] = 1.0;
        self.visit_count = 0;

        for i in (0..=loss.0).rev() {
            self.visit_count += 1;
            if !self.nodes[i].requires_grad && !matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = std::mem::take(&mut self.grads[i]);
            self.propagate(i, &g);
            self.grads[i] = g;
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        match self.nodes[i].op.clone() {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.node(a).rows, self.node(a).cols);
                let n = self.node(b).cols;
                if self.node(a).requires_grad {
                    let bv = &self.nodes[b].data;
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        for j in 0..n {
                            let grj = g[r * n + j];
                            if grj == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[r * k + p] += grj * bv[p * n + j];
                            }
                        }
                    }
                    add_into(&mut self.grads[a], &da);
                }
                if self.node(b).requires_grad {
                    let av = &self.nodes[a].data;
                    let mut db = vec![0.0; k * n];
                    for p in 0..k {
                        for r in 0..m {
                            let arp = av[r * k + p];
                            if arp == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += arp * g[r * n + j];
                            }
                        }
                    }
                    add_into(&mut self.grads[b], &db);
                }
            }
            Op::Transpose { a } => {
                let (m, n) = (self.node(a).rows, self.node(a).cols);
                if self.node(a).requires_grad {
                    let mut da = vec![0.0; m * n];
                    for r in 0..m {
                        for c in 0..n {
                            da[r * n + c] = g[c * m + r];
                        }
                    }
                    add_into(&mut self.grads[a], &da);
                }
            }
            Op::Add { a, b } => {
                if self.node(a).requires_grad {
                    add_into(&mut self.grads[a], g);
                }
                if self.node(b).requires_grad {
                    add_into(&mut self.grads[b], g);
                }
            }
            Op::Sub { a, b } => {
                if self.node(a).requires_grad {
                    add_into(&mut self.grads[a], g);
                }
                if self.node(b).requires_grad {
                    sub_into(&mut self.grads[b], g);
                }
            }
            Op::Mul { a, b } => {
                if self.node(a).requires_grad {
                    let bd = self.nodes[b].data.clone();
                    mul_add_into(&mut self.grads[a], g, &bd);
                }
                if self.node(b).requires_grad {
                    let ad = self.nodes[a].data.clone();
                    mul_add_into(&mut self.grads[b], g, &ad);
                }
            }
            Op::Neg { a } => {
                if self.node(a).requires_grad {
                    sub_into(&mut self.grads[a], g);
                }
            }
            Op::Scale { a, c } => {
                if self.node(a).requires_grad {
                    for (ga, &gi) in self.grads[a].iter_mut().zip(g) {
                        *ga += c * gi;
                    }
                }
            }
            Op::AddRowBroadcast { a, row } => {
                let d = self.node(row).cols;
                if self.node(a).requires_grad {
                    add_into(&mut self.grads[a], g);
                }
                if self.node(row).requires_grad {
                    for chunk in g.chunks(d) {
                        for (gr, &gi) in self.grads[row].iter_mut().zip(chunk) {
                            *gr += gi;
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if self.node(a).requires_grad {
                    let s = g[0];
                    self.grads[a].iter_mut().for_each(|v| *v += s);
                }
            }
            Op::MeanRows { a } => {
                if self.node(a).requires_grad {
                    let m = self.node(a).rows;
                    let d = self.node(a).cols;
                    let inv = 1.0 / m as f64;
                    for r in 0..m {
                        for (ga, &gc) in self.grads[a][r * d..(r + 1) * d].iter_mut().zip(g) {
                            *ga += gc * inv;
                        }
                    }
                }
            }
            Op::SoftmaxRows { a } => {
                if self.node(a).requires_grad {
                    let d = self.nodes[i].cols;
                    let y = self.nodes[i].data.clone();
                    for (r, (yrow, grow)) in y.chunks(d).zip(g.chunks(d)).enumerate() {
                        let dot: f64 = yrow.iter().zip(grow).map(|(&yv, &gv)| yv * gv).sum();
                        for c in 0..d {
                            self.grads[a][r * d + c] += yrow[c] * (grow[c] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows { a } => {
                if self.node(a).requires_grad {
                    let d = self.nodes[i].cols;
                    let y = self.nodes[i].data.clone(); // log-probs
                    for (r, (yrow, grow)) in y.chunks(d).zip(g.chunks(d)).enumerate() {
                        let gsum: f64 = grow.iter().sum();
                        for c in 0..d {
                            self.grads[a][r * d + c] += grow[c] - yrow[c].exp() * gsum;
                        }
                    }
                }
            }
            Op::LogSumExpAll { a } => {
                if self.node(a).requires_grad {
                    let s = self.nodes[i].data[0];
                    let gs = g[0];
                    let ad = self.nodes[a].data.clone();
                    for (ga, &x) in self.grads[a].iter_mut().zip(&ad) {
                        *ga += gs * (x - s).exp();
                    }
                }
            }
            Op::LayerNorm { a, gain, bias } => {
                let d = self.nodes[i].cols;
                let m = self.nodes[i].rows;
                let aux = self.nodes[i].aux.clone();
                let gv = self.nodes[gain].data.clone();
                for r in 0..m {
                    let inv_std = aux[r * (d + 1)];
                    let xhat = &aux[r * (d + 1) + 1..(r + 1) * (d + 1)];
                    let grow = &g[r * d..(r + 1) * d];
                    if self.node(gain).requires_grad {
                        for ((gg, &gv2), &xh) in
                            self.grads[gain].iter_mut().zip(grow).zip(xhat)
                        {
                            *gg += gv2 * xh;
                        }
                    }
                    if self.node(bias).requires_grad {
                        for (gb, &gv2) in self.grads[bias].iter_mut().zip(grow) {
                            *gb += gv2;
                        }
                    }
                    if self.node(a).requires_grad {
                        let dxhat: Vec<f64> =
                            grow.iter().zip(&gv).map(|(&gr, &gg)| gr * gg).collect();
                        let mean_dx: f64 = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx_xhat: f64 =
                            dxhat.iter().zip(xhat).map(|(&dx, &xh)| dx * xh).sum::<f64>()
                                / d as f64;
                        for c in 0..d {
                            self.grads[a][r * d + c] +=
                                inv_std * (dxhat[c] - mean_dx - xhat[c] * mean_dx_xhat);
                        }
                    }
                }
            }
            Op::Tanh { a } => {
                if self.node(a).requires_grad {
                    let y = self.nodes[i].data.clone();
                    for ((ga, &gi), &yv) in self.grads[a].iter_mut().zip(g).zip(&y) {
                        *ga += gi * (1.0 - yv * yv);
                    }
                }
            }
            Op::Sigmoid { a } => {
                if self.node(a).requires_grad {
                    let y = self.nodes[i].data.clone();
                    for ((ga, &gi), &yv) in self.grads[a].iter_mut().zip(g).zip(&y) {
                        *ga += gi * yv * (1.0 - yv);
                    }
                }
            }
            Op::Exp { a } => {
                if self.node(a).requires_grad {
                    let y = self.nodes[i].data.clone();
                    for ((ga, &gi), &yv) in self.grads[a].iter_mut().zip(g).zip(&y) {
                        *ga += gi * yv;
                    }
                }
            }
            Op::Log { a } => {
                if self.node(a).requires_grad {
                    let x = self.nodes[a].data.clone();
                    for ((ga, &gi), &xv) in self.grads[a].iter_mut().zip(g).zip(&x) {
                        *ga += gi / xv;
                    }
                }
            }
            Op::Softplus { a } => {
                if self.node(a).requires_grad {
                    let x = self.nodes[a].data.clone();
                    for ((ga, &gi), &xv) in self.grads[a].iter_mut().zip(g).zip(&x) {
                        *ga += gi * sigmoid(xv);
                    }
                }
            }
            Op::ClampMin { a, c } => {
                if self.node(a).requires_grad {
                    let x = self.nodes[a].data.clone();
                    for ((ga, &gi), &xv) in self.grads[a].iter_mut().zip(g).zip(&x) {
                        if xv > c {
                            *ga += gi;
                        }
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for p in parts {
                    let len = self.node(p).data.len();
                    if self.node(p).requires_grad {
                        let slice = g[off..off + len].to_vec();
                        add_into(&mut self.grads[p], &slice);
                    }
                    off += len;
                }
            }
            Op::ConcatCols { parts } => {
                let m = self.nodes[i].rows;
                let total = self.nodes[i].cols;
                let mut off = 0;
                for p in parts {
                    let w = self.node(p).cols;
                    if self.node(p).requires_grad {
                        for r in 0..m {
                            for c in 0..w {
                                self.grads[p][r * w + c] += g[r * total + off + c];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::GatherRows { a, idx } => {
                if self.node(a).requires_grad {
                    let d = self.node(a).cols;
                    for (out_r, &src_r) in idx.iter().enumerate() {
                        for c in 0..d {
                            self.grads[a][src_r * d + c] += g[out_r * d + c];
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sub_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d -= s;
    }
}

fn mul_add_into(dst: &mut [f64], g: &[f64], other: &[f64]) {
    for ((d, &gi), &o) in dst.iter_mut().zip(g).zip(other) {
        *d += gi * o;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable log(1 + e^x).
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
///
/// `f` re-evaluates the objective at a perturbed copy of `theta`; the closure
/// must be deterministic for the comparison to mean anything.
pub fn finite_diff_check<F>(mut f: F, theta: &[f64], analytic: &[f64], h: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(theta.len(), analytic.len());
    let mut work = theta.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..theta.len() {
        let orig = work[i];
        work[i] = orig + h;
        let fp = f(&work);
        work[i] = orig - h;
        let fm = f(&work);
        work[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let err = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    worst
}
