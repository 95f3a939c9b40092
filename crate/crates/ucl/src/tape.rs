//! Reverse-mode differentiation on a Wengert tape.
//!
//! Every primitive records the node ids of its inputs and enough metadata to
//! replay its backward rule. Nodes are appended in execution order, so the
//! tape is topologically sorted by construction and `backward` is a single
//! reverse sweep that visits each node exactly once.
//!
//! The op set is deliberately small: dense 2-D kernels plus row-wise vector
//! application, no general broadcasting. All arithmetic is f64 and every op is
//! pure, so two invocations with equal inputs produce bitwise-equal outputs.

use crate::error::{Result, UclError};
use crate::tensor::Tensor;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// `[m x n] + [n]` broadcast over rows.
    AddRowVec(NodeId, NodeId),
    /// Row `i` of `[m x n]` scaled by `v[i]`.
    ScaleRows(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    SoftmaxRows(NodeId),
    L2NormalizeRows {
        x: NodeId,
        eps: f64,
    },
    LayerNormRows {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    Gelu(NodeId),
    Log(NodeId),
    Exp(NodeId),
    /// `[1]` scalar repeated into a `[len]` vector.
    BroadcastScalar(NodeId),
    GatherRows {
        table: NodeId,
        ids: Vec<usize>,
    },
    SumRows(NodeId),
    MeanRows(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
        len: usize,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<NodeId>),
    /// Mean over rows of `logsumexp(row) - row[label]`; backward is
    /// `(softmax(row) - onehot(label)) / m`.
    CrossEntropyMean {
        logits: NodeId,
        labels: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    /// True when a requires-grad leaf is reachable through this node.
    needs_grad: bool,
    /// Leaves only: participate in backward as differentiable inputs.
    requires_grad: bool,
    /// Populated on requires-grad leaves after `backward`.
    grad: Option<Tensor>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        }
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn require_rank2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(UclError::shape(format!(
            "{what} expects a rank-2 tensor, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of a requires-grad leaf after `backward`; `None` before
    /// backward or for unreachable leaves.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data()[0]
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let needs = inputs.iter().any(|i| self.needs(*i));
        self.push(value, op, needs, false)
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(UclError::shape(format!(
                "add: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.record(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(UclError::shape(format!(
                "sub: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.record(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(UclError::shape(format!(
                "mul: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.record(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.record(out, Op::Scale(x, c), &[x])
    }

    pub fn add_row_vec(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (m, n) = require_rank2(self.value(x), "add_row_vec")?;
        let tv = self.value(v);
        if tv.shape() != [n] {
            return Err(UclError::shape(format!(
                "add_row_vec: vector shape {:?}, expected [{n}]",
                tv.shape()
            )));
        }
        let tx = self.value(x);
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(tx.data()[i * n + j] + self.value(v).data()[j]);
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.record(out, Op::AddRowVec(x, v), &[x, v]))
    }

    pub fn scale_rows(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (m, n) = require_rank2(self.value(x), "scale_rows")?;
        let tv = self.value(v);
        if tv.shape() != [m] {
            return Err(UclError::shape(format!(
                "scale_rows: vector shape {:?}, expected [{m}]",
                tv.shape()
            )));
        }
        let tx = self.value(x);
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let s = tv.data()[i];
            for j in 0..n {
                data.push(tx.data()[i * n + j] * s);
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.record(out, Op::ScaleRows(x, v), &[x, v]))
    }

    // ---- linear algebra --------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = require_rank2(self.value(a), "matmul lhs")?;
        let (kb, n) = require_rank2(self.value(b), "matmul rhs")?;
        if ka != kb {
            return Err(UclError::shape(format!(
                "matmul: inner dims {ka} vs {kb}"
            )));
        }
        let mut data = vec![0.0; m * n];
        dgemm(
            m,
            ka,
            n,
            1.0,
            self.value(a).data(),
            ka as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            0.0,
            &mut data,
        );
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.record(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = require_rank2(self.value(x), "transpose")?;
        let tx = self.value(x);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = tx.data()[i * n + j];
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        Ok(self.record(out, Op::Transpose(x), &[x]))
    }

    // ---- row-wise nonlinearities ----------------------------------------

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = require_rank2(self.value(x), "softmax_rows")?;
        if n == 0 {
            return Err(UclError::shape("softmax_rows over zero columns"));
        }
        let tx = self.value(x);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &tx.data()[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                data[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                data[i * n + j] /= sum;
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.record(out, Op::SoftmaxRows(x), &[x]))
    }

    pub fn l2_normalize_rows(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let (m, n) = require_rank2(self.value(x), "l2_normalize_rows")?;
        let tx = self.value(x);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &tx.data()[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = if norm < eps { eps } else { norm };
            for j in 0..n {
                data[i * n + j] = row[j] / denom;
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.record(out, Op::L2NormalizeRows { x, eps }, &[x]))
    }

    pub fn layer_norm_rows(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (m, n) = require_rank2(self.value(x), "layer_norm_rows")?;
        if self.value(gain).shape() != [n] || self.value(bias).shape() != [n] {
            return Err(UclError::shape(format!(
                "layer_norm_rows: gain/bias must be [{n}]"
            )));
        }
        let mut data = vec![0.0; m * n];
        {
            let tx = self.value(x).data();
            let tg = self.value(gain).data();
            let tb = self.value(bias).data();
            for i in 0..m {
                let row = &tx[i * n..(i + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..n {
                    data[i * n + j] = (row[j] - mean) * inv * tg[j] + tb[j];
                }
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.record(
            out,
            Op::LayerNormRows { x, gain, bias, eps },
            &[x, gain, bias],
        ))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .map(|&v| {
                let u = GELU_C * (v + GELU_K * v * v * v);
                0.5 * v * (1.0 + u.tanh())
            })
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.record(out, Op::Gelu(x), &[x])
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v.ln()).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.record(out, Op::Log(x), &[x])
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v.exp()).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.record(out, Op::Exp(x), &[x])
    }

    /// Repeat a `[1]` scalar into a `[len]` vector.
    pub fn broadcast_scalar(&mut self, x: NodeId, len: usize) -> Result<NodeId> {
        if !self.value(x).is_scalar() {
            return Err(UclError::shape(format!(
                "broadcast_scalar expects a scalar, got shape {:?}",
                self.value(x).shape()
            )));
        }
        let v = self.value(x).data()[0];
        let out = Tensor::new(vec![len], vec![v; len])?;
        Ok(self.record(out, Op::BroadcastScalar(x), &[x]))
    }

    // ---- gather / reductions / reshaping ---------------------------------

    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, w) = require_rank2(self.value(table), "gather_rows table")?;
        for &id in ids {
            if id >= v {
                return Err(UclError::contract(format!(
                    "gather_rows: row id {id} out of range {v}"
                )));
            }
        }
        let tt = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * w);
        for &id in ids {
            data.extend_from_slice(&tt.data()[id * w..(id + 1) * w]);
        }
        let out = Tensor::new(vec![ids.len(), w], data)?;
        Ok(self.record(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn sum_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = require_rank2(self.value(x), "sum_rows")?;
        let tx = self.value(x);
        let mut data = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                data[j] += tx.data()[i * n + j];
            }
        }
        let out = Tensor::new(vec![1, n], data)?;
        Ok(self.record(out, Op::SumRows(x), &[x]))
    }

    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = require_rank2(self.value(x), "mean_rows")?;
        if m == 0 {
            return Err(UclError::shape("mean_rows over zero rows"));
        }
        let tx = self.value(x);
        let mut data = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                data[j] += tx.data()[i * n + j];
            }
        }
        for d in data.iter_mut() {
            *d /= m as f64;
        }
        let out = Tensor::new(vec![1, n], data)?;
        Ok(self.record(out, Op::MeanRows(x), &[x]))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().sum();
        self.record(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(UclError::shape("mean_all over zero elements"));
        }
        let s: f64 = self.value(x).data().iter().sum();
        Ok(self.record(Tensor::scalar(s / n as f64), Op::MeanAll(x), &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(UclError::contract("concat_rows of zero parts"));
        }
        let (_, n0) = require_rank2(self.value(parts[0]), "concat_rows")?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (m, n) = require_rank2(self.value(p), "concat_rows part")?;
            if n != n0 {
                return Err(UclError::shape(format!(
                    "concat_rows: column mismatch {n} vs {n0}"
                )));
            }
            rows += m;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, n0], data)?;
        Ok(self.record(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = require_rank2(self.value(x), "slice_rows")?;
        if start + len > m {
            return Err(UclError::shape(format!(
                "slice_rows: {start}+{len} > {m} rows"
            )));
        }
        let tx = self.value(x);
        let data = tx.data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::new(vec![len, n], data)?;
        Ok(self.record(out, Op::SliceRows { x, start, len }, &[x]))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = require_rank2(self.value(x), "slice_cols")?;
        if start + len > n {
            return Err(UclError::shape(format!(
                "slice_cols: {start}+{len} > {n} cols"
            )));
        }
        let tx = self.value(x);
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&tx.data()[i * n + start..i * n + start + len]);
        }
        let out = Tensor::new(vec![m, len], data)?;
        Ok(self.record(out, Op::SliceCols { x, start, len }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(UclError::contract("concat_cols of zero parts"));
        }
        let (m0, _) = require_rank2(self.value(parts[0]), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (m, n) = require_rank2(self.value(p), "concat_cols part")?;
            if m != m0 {
                return Err(UclError::shape(format!(
                    "concat_cols: row mismatch {m} vs {m0}"
                )));
            }
            widths.push(n);
            total += n;
        }
        let mut data = Vec::with_capacity(m0 * total);
        for i in 0..m0 {
            for (pi, &p) in parts.iter().enumerate() {
                let n = widths[pi];
                let tp = self.value(p);
                data.extend_from_slice(&tp.data()[i * n..(i + 1) * n]);
            }
        }
        let out = Tensor::new(vec![m0, total], data)?;
        Ok(self.record(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Mean cross-entropy from raw logits with integer targets, computed via a
    /// stable per-row log-sum-exp.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (m, n) = require_rank2(self.value(logits), "cross_entropy_mean")?;
        if labels.len() != m {
            return Err(UclError::contract(format!(
                "cross_entropy_mean: {} labels for {m} rows",
                labels.len()
            )));
        }
        if m == 0 {
            return Err(UclError::contract("cross_entropy_mean over empty batch"));
        }
        for &l in labels {
            if l >= n {
                return Err(UclError::contract(format!(
                    "cross_entropy_mean: label {l} out of range {n}"
                )));
            }
        }
        let tl = self.value(logits);
        let mut total = 0.0;
        for i in 0..m {
            let row = &tl.data()[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[labels[i]];
        }
        let out = Tensor::scalar(total / m as f64);
        Ok(self.record(
            out,
            Op::CrossEntropyMean {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar loss. Populates `grad` on every
    /// requires-grad leaf reachable from the loss; unreachable leaves are left
    /// untouched.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(UclError::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::filled(self.nodes[loss.0].value.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let op = self.nodes[id].op.clone();
            self.backward_step(id, &op, &g, &mut grads);
            if self.nodes[id].requires_grad {
                match &mut self.nodes[id].grad {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor>],
        target: NodeId,
        write: impl FnOnce(&mut [f64]),
    ) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        let slot = &mut grads[target.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[target.0].value.shape()));
        }
        write(slot.as_mut().unwrap().data_mut());
    }

    fn backward_step(&self, id: usize, op: &Op, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| {
                    for (x, y) in d.iter_mut().zip(g.data()) {
                        *x += y;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for (x, y) in d.iter_mut().zip(g.data()) {
                        *x += y;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| {
                    for (x, y) in d.iter_mut().zip(g.data()) {
                        *x += y;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for (x, y) in d.iter_mut().zip(g.data()) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g.data()[i] * vb.data()[i];
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += g.data()[i] * va.data()[i];
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, |d| {
                    for (x, y) in d.iter_mut().zip(g.data()) {
                        *x += c * y;
                    }
                });
            }
            Op::AddRowVec(x, v) => {
                let n = self.nodes[v.0].value.numel();
                let m = self.nodes[x.0].value.shape()[0];
                self.accumulate(grads, *x, |d| {
                    for (x, y) in d.iter_mut().zip(g.data()) {
                        *x += y;
                    }
                });
                self.accumulate(grads, *v, |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[j] += g.data()[i * n + j];
                        }
                    }
                });
            }
            Op::ScaleRows(x, v) => {
                let vx = &self.nodes[x.0].value;
                let vv = &self.nodes[v.0].value;
                let (m, n) = (vx.shape()[0], vx.shape()[1]);
                self.accumulate(grads, *x, |d| {
                    for i in 0..m {
                        let s = vv.data()[i];
                        for j in 0..n {
                            d[i * n + j] += g.data()[i * n + j] * s;
                        }
                    }
                });
                self.accumulate(grads, *v, |d| {
                    for i in 0..m {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g.data()[i * n + j] * vx.data()[i * n + j];
                        }
                        d[i] += acc;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                // dA += g . B^T
                self.accumulate(grads, *a, |d| {
                    dgemm(m, n, k, 1.0, g.data(), n as isize, 1, vb.data(), 1, n as isize, 1.0, d);
                });
                // dB += A^T . g
                self.accumulate(grads, *b, |d| {
                    dgemm(k, m, n, 1.0, va.data(), 1, k as isize, g.data(), n as isize, 1, 1.0, d);
                });
            }
            Op::Transpose(x) => {
                let (n, m) = {
                    let s = self.nodes[id].value.shape();
                    (s[0], s[1])
                };
                self.accumulate(grads, *x, |d| {
                    for i in 0..n {
                        for j in 0..m {
                            d[j * n + i] += g.data()[i * m + j];
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let y = &self.nodes[id].value;
                let (m, n) = (y.shape()[0], y.shape()[1]);
                self.accumulate(grads, *x, |d| {
                    for i in 0..m {
                        let yr = &y.data()[i * n..(i + 1) * n];
                        let gr = &g.data()[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            d[i * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::L2NormalizeRows { x, eps } => {
                let vx = &self.nodes[x.0].value;
                let y = &self.nodes[id].value;
                let (m, n) = (vx.shape()[0], vx.shape()[1]);
                let eps = *eps;
                self.accumulate(grads, *x, |d| {
                    for i in 0..m {
                        let xr = &vx.data()[i * n..(i + 1) * n];
                        let yr = &y.data()[i * n..(i + 1) * n];
                        let gr = &g.data()[i * n..(i + 1) * n];
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm < eps {
                            for j in 0..n {
                                d[i * n + j] += gr[j] / eps;
                            }
                        } else {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for j in 0..n {
                                d[i * n + j] += (gr[j] - yr[j] * dot) / norm;
                            }
                        }
                    }
                });
            }
            Op::LayerNormRows { x, gain, bias, eps } => {
                let vx = &self.nodes[x.0].value;
                let vg = &self.nodes[gain.0].value;
                let (m, n) = (vx.shape()[0], vx.shape()[1]);
                let eps = *eps;
                // Recompute per-row statistics; cheaper than caching given the
                // tape is rebuilt every step anyway.
                let mut xhat = vec![0.0; m * n];
                let mut inv_std = vec![0.0; m];
                for i in 0..m {
                    let row = &vx.data()[i * n..(i + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    inv_std[i] = inv;
                    for j in 0..n {
                        xhat[i * n + j] = (row[j] - mean) * inv;
                    }
                }
                self.accumulate(grads, *gain, |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[j] += g.data()[i * n + j] * xhat[i * n + j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[j] += g.data()[i * n + j];
                        }
                    }
                });
                self.accumulate(grads, *x, |d| {
                    for i in 0..m {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_xhat = 0.0;
                        for j in 0..n {
                            let dh = g.data()[i * n + j] * vg.data()[j];
                            sum_dh += dh;
                            sum_dh_xhat += dh * xhat[i * n + j];
                        }
                        let mean_dh = sum_dh / n as f64;
                        let mean_dh_xhat = sum_dh_xhat / n as f64;
                        for j in 0..n {
                            let dh = g.data()[i * n + j] * vg.data()[j];
                            d[i * n + j] +=
                                inv_std[i] * (dh - mean_dh - xhat[i * n + j] * mean_dh_xhat);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = &self.nodes[x.0].value;
                self.accumulate(grads, *x, |d| {
                    for i in 0..d.len() {
                        let v = vx.data()[i];
                        let u = GELU_C * (v + GELU_K * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                        let dy = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                        d[i] += g.data()[i] * dy;
                    }
                });
            }
            Op::Log(x) => {
                let vx = &self.nodes[x.0].value;
                self.accumulate(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += g.data()[i] / vx.data()[i];
                    }
                });
            }
            Op::Exp(x) => {
                let y = &self.nodes[id].value;
                self.accumulate(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += g.data()[i] * y.data()[i];
                    }
                });
            }
            Op::BroadcastScalar(x) => {
                let total: f64 = g.data().iter().sum();
                self.accumulate(grads, *x, |d| {
                    d[0] += total;
                });
            }
            Op::GatherRows { table, ids } => {
                let w = self.nodes[table.0].value.shape()[1];
                self.accumulate(grads, *table, |d| {
                    for (t, &id) in ids.iter().enumerate() {
                        for j in 0..w {
                            d[id * w + j] += g.data()[t * w + j];
                        }
                    }
                });
            }
            Op::SumRows(x) => {
                let (m, n) = {
                    let s = self.nodes[x.0].value.shape();
                    (s[0], s[1])
                };
                self.accumulate(grads, *x, |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += g.data()[j];
                        }
                    }
                });
            }
            Op::MeanRows(x) => {
                let (m, n) = {
                    let s = self.nodes[x.0].value.shape();
                    (s[0], s[1])
                };
                let inv = 1.0 / m as f64;
                self.accumulate(grads, *x, |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += g.data()[j] * inv;
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let gv = g.data()[0];
                self.accumulate(grads, *x, |d| {
                    for v in d.iter_mut() {
                        *v += gv;
                    }
                });
            }
            Op::MeanAll(x) => {
                let numel = self.nodes[x.0].value.numel();
                let gv = g.data()[0] / numel as f64;
                self.accumulate(grads, *x, |d| {
                    for v in d.iter_mut() {
                        *v += gv;
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (m, n) = {
                        let s = self.nodes[p.0].value.shape();
                        (s[0], s[1])
                    };
                    let start = offset;
                    self.accumulate(grads, p, |d| {
                        d.iter_mut()
                            .zip(&g.data()[start..start + m * n])
                            .for_each(|(a, b)| *a += b);
                    });
                    offset += m * n;
                }
            }
            Op::SliceRows { x, start, len } => {
                let n = self.nodes[x.0].value.shape()[1];
                let (start, len) = (*start, *len);
                self.accumulate(grads, *x, |d| {
                    d[start * n..(start + len) * n]
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, b)| *a += b);
                });
            }
            Op::SliceCols { x, start, len } => {
                let (m, n) = {
                    let s = self.nodes[x.0].value.shape();
                    (s[0], s[1])
                };
                let (start, len) = (*start, *len);
                self.accumulate(grads, *x, |d| {
                    for i in 0..m {
                        for j in 0..len {
                            d[i * n + start + j] += g.data()[i * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let m = self.nodes[id].value.shape()[0];
                let total = self.nodes[id].value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.shape()[1];
                    let start = offset;
                    self.accumulate(grads, p, |d| {
                        for i in 0..m {
                            for j in 0..n {
                                d[i * n + j] += g.data()[i * total + start + j];
                            }
                        }
                    });
                    offset += n;
                }
            }
            Op::CrossEntropyMean { logits, labels } => {
                let vl = &self.nodes[logits.0].value;
                let (m, n) = (vl.shape()[0], vl.shape()[1]);
                let gv = g.data()[0] / m as f64;
                self.accumulate(grads, *logits, |d| {
                    for i in 0..m {
                        let row = &vl.data()[i * n..(i + 1) * n];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        for j in 0..n {
                            let p = (row[j] - max).exp() / sum;
                            let onehot = if j == labels[i] { 1.0 } else { 0.0 };
                            d[i * n + j] += gv * (p - onehot);
                        }
                    }
                });
            }
        }
    }
}

// ---- gradient checking ----------------------------------------------------

/// Symmetric relative error between analytic and numeric gradient buffers:
/// `max_coord |a - n| / max(1e-8, |a| + |n|)`.
pub fn max_sym_rel_err(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            let err = (av - nv).abs() / f64::max(1e-8, av.abs() + nv.abs());
            worst = worst.max(err);
        }
    }
    worst
}

/// Central-difference gradients of a scalar computation with respect to each
/// parameter coordinate. `build` must construct the loss on the given tape
/// from leaves in parameter order.
pub fn central_diff_grads<F>(build: &F, params: &[Tensor], h: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| tape.leaf(p.clone(), false)).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.scalar_value(loss))
    };
    let mut out = Vec::with_capacity(params.len());
    let mut work: Vec<Tensor> = params.to_vec();
    for pi in 0..params.len() {
        let mut grad = Tensor::zeros(params[pi].shape());
        for ci in 0..params[pi].numel() {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + h;
            let up = eval(&work)?;
            work[pi].data_mut()[ci] = orig - h;
            let down = eval(&work)?;
            work[pi].data_mut()[ci] = orig;
            grad.data_mut()[ci] = (up - down) / (2.0 * h);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Analytic (tape) gradients of the same computation.
pub fn analytic_grads<F>(build: &F, params: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    Ok(ids
        .iter()
        .zip(params)
        .map(|(&id, p)| {
            tape.grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape()))
        })
        .collect())
}

/// Max symmetric relative error of tape gradients against central differences.
pub fn grad_check<F>(build: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let analytic = analytic_grads(&build, params)?;
    let numeric = central_diff_grads(&build, params, h)?;
    Ok(max_sym_rel_err(&analytic, &numeric))
}
