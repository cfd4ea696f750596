//! Tape-based reverse-mode differentiation over [`Tensor2`] values.
//!
//! Every primitive appends one node holding its forward value and the inputs
//! (plus saved indices) its backward rule needs. Nodes are only ever appended,
//! so ascending node order is a topological order and [`Tape::backward`] walks
//! it in reverse, visiting each node once.

use crate::error::{GastonError, Result};
use crate::numerics::tensor::{dot, sigmoid, softplus, Tensor2};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMulNt(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    GatherMean(Var, Vec<Vec<usize>>),
    HeadDot {
        q: Var,
        k: Var,
        heads: usize,
        scale: f64,
    },
    SegmentSoftmax {
        x: Var,
        segments: Vec<usize>,
        n_segments: usize,
    },
    HeadScale {
        v: Var,
        w: Var,
        heads: usize,
    },
    ScatterAddRows(Var, Vec<usize>),
    RowDot(Var, Var),
    SumSquares(Var),
    BceWithLogits(Var, Vec<f64>),
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Tensor2,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for a single backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    relu_margin: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(GastonError::Argument(msg()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            relu_margin: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest |pre-activation| seen by any ReLU on this tape. Finite
    /// difference checks are only meaningful when this exceeds the step size.
    pub fn relu_margin(&self) -> f64 {
        self.relu_margin
    }

    fn push(&mut self, value: Tensor2, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A trainable input.
    pub fn param(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMulNt(a, b), ng))
    }

    /// Adds the `1 x cols` row `bias` to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        check(bv.rows() == 1 && bv.cols() == av.cols(), || {
            format!("bias shape {:?} incompatible with {:?}", bv.shape(), av.shape())
        })?;
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(value, Op::AddBias(a, bias), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check(av.shape() == bv.shape(), || {
            format!("add shape mismatch {:?} vs {:?}", av.shape(), bv.shape())
        })?;
        let mut value = av.clone();
        value.add_assign(bv);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check(av.shape() == bv.shape(), || {
            format!("sub shape mismatch {:?} vs {:?}", av.shape(), bv.shape())
        })?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect();
        let value = Tensor2::from_vec(av.rows(), av.cols(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut value = self.value(a).clone();
        value.scale_in_place(s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        let mut margin = self.relu_margin;
        for x in value.data_mut() {
            margin = margin.min(x.abs());
            if *x < 0.0 {
                *x = 0.0;
            }
        }
        self.relu_margin = margin;
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    /// Row `i` of the output is row `idx[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let mut value = Tensor2::zeros(idx.len(), av.cols());
        for (i, &j) in idx.iter().enumerate() {
            check(j < av.rows(), || format!("gather index {j} >= {}", av.rows()))?;
            value.row_mut(i).copy_from_slice(av.row(j));
        }
        let ng = self.ng(a);
        Ok(self.push(value, Op::GatherRows(a, idx.to_vec()), ng))
    }

    /// Stacks the inputs vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        check(!parts.is_empty(), || "concat of zero tensors".into())?;
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            check(pv.cols() == cols, || {
                format!("concat column mismatch {} vs {cols}", pv.cols())
            })?;
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let value = Tensor2::from_vec(rows, cols, data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Row `i` of the output is the mean of rows `lists[i]` of `a`, or zeros
    /// when the list is empty.
    pub fn gather_mean(&mut self, a: Var, lists: Vec<Vec<usize>>) -> Result<Var> {
        let av = self.value(a);
        let mut value = Tensor2::zeros(lists.len(), av.cols());
        for (i, list) in lists.iter().enumerate() {
            if list.is_empty() {
                continue;
            }
            let inv = 1.0 / list.len() as f64;
            let out = value.row_mut(i);
            for &j in list {
                check(j < av.rows(), || format!("gather index {j} >= {}", av.rows()))?;
                for (o, x) in out.iter_mut().zip(av.row(j)) {
                    *o += x;
                }
            }
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(value, Op::GatherMean(a, lists), ng))
    }

    /// Per-row, per-head scaled dot products: `out[e,h] = scale * <q[e,h·], k[e,h·]>`
    /// where each head owns a contiguous `cols / heads` slice.
    pub fn head_dot(&mut self, q: Var, k: Var, heads: usize, scale: f64) -> Result<Var> {
        let (qv, kv) = (self.value(q), self.value(k));
        check(qv.shape() == kv.shape(), || {
            format!("head_dot shape mismatch {:?} vs {:?}", qv.shape(), kv.shape())
        })?;
        check(heads > 0 && qv.cols() % heads == 0, || {
            format!("{} columns not divisible into {heads} heads", qv.cols())
        })?;
        let dk = qv.cols() / heads;
        let mut value = Tensor2::zeros(qv.rows(), heads);
        for e in 0..qv.rows() {
            let (qr, kr) = (qv.row(e), kv.row(e));
            for h in 0..heads {
                let s = h * dk;
                value.set(e, h, scale * dot(&qr[s..s + dk], &kr[s..s + dk]));
            }
        }
        let ng = self.ng(q) || self.ng(k);
        Ok(self.push(value, Op::HeadDot { q, k, heads, scale }, ng))
    }

    /// Softmax over the rows sharing a segment id, independently per column.
    pub fn segment_softmax(&mut self, x: Var, segments: &[usize], n_segments: usize) -> Result<Var> {
        let xv = self.value(x);
        check(segments.len() == xv.rows(), || {
            format!("{} segment ids for {} rows", segments.len(), xv.rows())
        })?;
        check(segments.iter().all(|&s| s < n_segments), || {
            "segment id out of range".into()
        })?;
        let cols = xv.cols();
        let mut max = vec![f64::NEG_INFINITY; n_segments * cols];
        for (e, &s) in segments.iter().enumerate() {
            for c in 0..cols {
                let m = &mut max[s * cols + c];
                *m = m.max(xv.get(e, c));
            }
        }
        let mut value = Tensor2::zeros(xv.rows(), cols);
        let mut sum = vec![0.0; n_segments * cols];
        for (e, &s) in segments.iter().enumerate() {
            for c in 0..cols {
                let ex = (xv.get(e, c) - max[s * cols + c]).exp();
                value.set(e, c, ex);
                sum[s * cols + c] += ex;
            }
        }
        for (e, &s) in segments.iter().enumerate() {
            for c in 0..cols {
                let y = value.get(e, c) / sum[s * cols + c];
                value.set(e, c, y);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            value,
            Op::SegmentSoftmax {
                x,
                segments: segments.to_vec(),
                n_segments,
            },
            ng,
        ))
    }

    /// Multiplies each head slice of row `e` of `v` by `w[e,h]`.
    pub fn head_scale(&mut self, v: Var, w: Var, heads: usize) -> Result<Var> {
        let (vv, wv) = (self.value(v), self.value(w));
        check(
            wv.rows() == vv.rows() && wv.cols() == heads && heads > 0 && vv.cols() % heads == 0,
            || format!("head_scale shapes {:?} and {:?} with {heads} heads", vv.shape(), wv.shape()),
        )?;
        let dk = vv.cols() / heads;
        let mut value = vv.clone();
        for e in 0..vv.rows() {
            let row = value.row_mut(e);
            for (c, x) in row.iter_mut().enumerate() {
                *x *= wv.get(e, c / dk);
            }
        }
        let ng = self.ng(v) || self.ng(w);
        Ok(self.push(value, Op::HeadScale { v, w, heads }, ng))
    }

    /// Sums row `i` of `x` into output row `idx[i]`; output has `n_out` rows.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], n_out: usize) -> Result<Var> {
        let xv = self.value(x);
        check(idx.len() == xv.rows(), || {
            format!("{} scatter indices for {} rows", idx.len(), xv.rows())
        })?;
        let mut value = Tensor2::zeros(n_out, xv.cols());
        for (i, &j) in idx.iter().enumerate() {
            check(j < n_out, || format!("scatter index {j} >= {n_out}"))?;
            for (o, a) in value.row_mut(j).iter_mut().zip(xv.row(i)) {
                *o += a;
            }
        }
        let ng = self.ng(x);
        // the output row count is recoverable from the value, so only indices are saved
        Ok(self.push(value, Op::ScatterAddRows(x, idx.to_vec()), ng))
    }

    /// `out[i] = <a[i], b[i]>`, shape `rows x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check(av.shape() == bv.shape(), || {
            format!("row_dot shape mismatch {:?} vs {:?}", av.shape(), bv.shape())
        })?;
        let data = (0..av.rows()).map(|i| dot(av.row(i), bv.row(i))).collect();
        let value = Tensor2::from_vec(av.rows(), 1, data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::RowDot(a, b), ng))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|x| x * x).sum();
        let ng = self.ng(a);
        self.push(Tensor2::scalar(s), Op::SumSquares(a), ng)
    }

    /// Mean binary cross-entropy of `sigmoid(z)` against 0/1 labels, computed
    /// as `softplus(z) - y·z`.
    pub fn bce_with_logits(&mut self, z: Var, labels: &[f64]) -> Result<Var> {
        let zv = self.value(z);
        check(zv.cols() == 1 && zv.rows() == labels.len() && !labels.is_empty(), || {
            format!("bce shape {:?} with {} labels", zv.shape(), labels.len())
        })?;
        let n = labels.len() as f64;
        let s: f64 = zv
            .data()
            .iter()
            .zip(labels)
            .map(|(&z, &y)| softplus(z) - y * z)
            .sum();
        let ng = self.ng(z);
        Ok(self.push(Tensor2::scalar(s / n), Op::BceWithLogits(z, labels.to_vec()), ng))
    }

    /// Mean over rows of `weights[y] * -log softmax(logits)[y]`.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        check(lv.rows() == labels.len() && !labels.is_empty(), || {
            format!("{} labels for {} rows", labels.len(), lv.rows())
        })?;
        check(weights.len() == lv.cols(), || {
            format!("{} weights for {} classes", weights.len(), lv.cols())
        })?;
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            check(y < lv.cols(), || format!("label {y} >= {} classes", lv.cols()))?;
            total += weights[y] * -log_softmax(lv.row(i))[y];
        }
        let value = Tensor2::scalar(total / labels.len() as f64);
        let ng = self.ng(logits);
        Ok(self.push(
            value,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            },
            ng,
        ))
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        check(lv.shape() == (1, 1), || {
            format!("backward needs a 1x1 loss, got {:?}", lv.shape())
        })?;
        let mut grads: Vec<Option<Tensor2>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor2::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor2, grads: &mut [Option<Tensor2>]) -> Result<()> {
        let mut acc = |v: Var, delta: Tensor2| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMulNt(a, b) => {
                // out = A Bᵀ: dA = G B, dB = Gᵀ A
                if self.ng(*a) {
                    acc(*a, g.matmul(self.value(*b))?);
                }
                if self.ng(*b) {
                    acc(*b, g.matmul_tn(self.value(*a))?);
                }
            }
            Op::AddBias(a, b) => {
                acc(*a, g.clone());
                if self.ng(*b) {
                    let mut db = Tensor2::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, x) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                let mut neg = g.clone();
                neg.scale_in_place(-1.0);
                acc(*b, neg);
            }
            Op::Scale(a, s) => {
                let mut d = g.clone();
                d.scale_in_place(*s);
                acc(*a, d);
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                for (x, y) in d.data_mut().iter_mut().zip(node.value.data()) {
                    if *y <= 0.0 {
                        *x = 0.0;
                    }
                }
                acc(*a, d);
            }
            Op::GatherRows(a, idx) => {
                let av = self.value(*a);
                let mut d = Tensor2::zeros(av.rows(), av.cols());
                for (i, &j) in idx.iter().enumerate() {
                    for (o, x) in d.row_mut(j).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                acc(*a, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.rows() * pv.cols();
                    let start = offset * pv.cols();
                    let d = Tensor2::from_vec(pv.rows(), pv.cols(), g.data()[start..start + n].to_vec())?;
                    offset += pv.rows();
                    acc(p, d);
                }
            }
            Op::GatherMean(a, lists) => {
                let av = self.value(*a);
                let mut d = Tensor2::zeros(av.rows(), av.cols());
                for (i, list) in lists.iter().enumerate() {
                    if list.is_empty() {
                        continue;
                    }
                    let inv = 1.0 / list.len() as f64;
                    for &j in list {
                        for (o, x) in d.row_mut(j).iter_mut().zip(g.row(i)) {
                            *o += inv * x;
                        }
                    }
                }
                acc(*a, d);
            }
            Op::HeadDot { q, k, heads, scale } => {
                let (qv, kv) = (self.value(*q), self.value(*k));
                let dk = qv.cols() / heads;
                let mut dq = Tensor2::zeros(qv.rows(), qv.cols());
                let mut dkt = Tensor2::zeros(kv.rows(), kv.cols());
                for e in 0..qv.rows() {
                    for c in 0..qv.cols() {
                        let ge = scale * g.get(e, c / dk);
                        dq.set(e, c, ge * kv.get(e, c));
                        dkt.set(e, c, ge * qv.get(e, c));
                    }
                }
                acc(*q, dq);
                acc(*k, dkt);
            }
            Op::SegmentSoftmax {
                x,
                segments,
                n_segments,
            } => {
                let y = &node.value;
                let cols = y.cols();
                let mut inner = vec![0.0; n_segments * cols];
                for (e, &s) in segments.iter().enumerate() {
                    for c in 0..cols {
                        inner[s * cols + c] += y.get(e, c) * g.get(e, c);
                    }
                }
                let mut d = Tensor2::zeros(y.rows(), cols);
                for (e, &s) in segments.iter().enumerate() {
                    for c in 0..cols {
                        d.set(e, c, y.get(e, c) * (g.get(e, c) - inner[s * cols + c]));
                    }
                }
                acc(*x, d);
            }
            Op::HeadScale { v, w, heads } => {
                let (vv, wv) = (self.value(*v), self.value(*w));
                let dk = vv.cols() / heads;
                let mut dv = Tensor2::zeros(vv.rows(), vv.cols());
                let mut dw = Tensor2::zeros(wv.rows(), wv.cols());
                for e in 0..vv.rows() {
                    for c in 0..vv.cols() {
                        let h = c / dk;
                        dv.set(e, c, g.get(e, c) * wv.get(e, h));
                        let cur = dw.get(e, h);
                        dw.set(e, h, cur + g.get(e, c) * vv.get(e, c));
                    }
                }
                acc(*v, dv);
                acc(*w, dw);
            }
            Op::ScatterAddRows(x, idx) => {
                let xv = self.value(*x);
                let mut d = Tensor2::zeros(xv.rows(), xv.cols());
                for (i, &j) in idx.iter().enumerate() {
                    d.row_mut(i).copy_from_slice(g.row(j));
                }
                acc(*x, d);
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = bv.clone();
                let mut db = av.clone();
                for r in 0..av.rows() {
                    let gr = g.get(r, 0);
                    da.row_mut(r).iter_mut().for_each(|x| *x *= gr);
                    db.row_mut(r).iter_mut().for_each(|x| *x *= gr);
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::SumSquares(a) => {
                let mut d = self.value(*a).clone();
                d.scale_in_place(2.0 * g.data()[0]);
                acc(*a, d);
            }
            Op::BceWithLogits(z, labels) => {
                let zv = self.value(*z);
                let n = labels.len() as f64;
                let s = g.data()[0] / n;
                let data = zv
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&z, &y)| s * (sigmoid(z) - y))
                    .collect();
                acc(*z, Tensor2::from_vec(zv.rows(), 1, data)?);
            }
            Op::SoftmaxCe {
                logits,
                labels,
                weights,
            } => {
                let lv = self.value(*logits);
                let s = g.data()[0] / labels.len() as f64;
                let mut d = Tensor2::zeros(lv.rows(), lv.cols());
                for (i, &y) in labels.iter().enumerate() {
                    let lp = log_softmax(lv.row(i));
                    let row = d.row_mut(i);
                    for (c, o) in row.iter_mut().enumerate() {
                        let onehot = if c == y { 1.0 } else { 0.0 };
                        *o = s * weights[y] * (lp[c].exp() - onehot);
                    }
                }
                acc(*logits, d);
            }
        }
        Ok(())
    }
}

pub(crate) fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor2>>,
}

impl Gradients {
    /// `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor2> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// The gradient of `v`, or zeros shaped like `like` if it had none.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor2) -> Tensor2 {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor2::zeros(like.rows(), like.cols()))
    }
}
