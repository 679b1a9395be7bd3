//! Reverse-mode automatic differentiation over 2-D `f64` tensors.
//!
//! A [`Graph`] records every operation of one forward pass. `backward`
//! walks the tape in reverse and accumulates parameter gradients into a
//! [`Grads`] buffer. Attention, layer norm, the losses and the box ops are
//! fused nodes with hand-written backward rules.

mod tensor;

pub use tensor::{dot, matmul, matmul_at, matmul_at_acc, matmul_acc, matmul_bt, Tensor};

use crate::geometry::{self, BBox};
use crate::params::{Grads, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Which keys each query may attend to.
#[derive(Debug, Clone)]
pub enum Mask {
    None,
    /// Query `i` sees keys `0..=i`.
    Causal,
    /// Only keys flagged `true` are visible.
    Keys(Vec<bool>),
}

impl Mask {
    fn allows(&self, i: usize, j: usize) -> bool {
        match self {
            Mask::None => true,
            Mask::Causal => j <= i,
            Mask::Keys(k) => k[j],
        }
    }
}

enum Op {
    Input,
    Param(ParamId),
    Embed { table: ParamId, ids: Vec<usize> },
    Gather { x: NodeId, ids: Vec<usize> },
    MatMul(NodeId, NodeId),
    MatMulBt(NodeId, NodeId),
    MatMulAt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine(NodeId, f64),
    Sigmoid(NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<Tensor>,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceRows { x: NodeId, start: usize },
    SumRows(NodeId),
    SumAll(NodeId),
    CrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Tensor },
    Bce { p: NodeId, targets: Vec<f64>, eps: f64 },
    CenterSizeToBox(NodeId),
    BoxLoss { pred: NodeId, target: BBox, l1_weight: f64, giou_weight: f64 },
    Overlap { region: NodeId, boxes: Vec<BBox> },
    Mix { switch: NodeId, visual: NodeId, linguistic: NodeId },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A recorded forward computation reading parameters from a store.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let v = self.store.get(id).clone();
        self.push(v, Op::Param(id))
    }

    /// Gathers rows `ids` of an embedding table.
    pub fn embed(&mut self, table: ParamId, ids: &[usize]) -> NodeId {
        let t = self.store.get(table);
        let d = t.cols();
        let mut out = Tensor::zeros(ids.len(), d);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(out, Op::Embed { table, ids: ids.to_vec() })
    }

    /// Gathers rows `ids` of a computed node.
    pub fn gather_rows(&mut self, x: NodeId, ids: &[usize]) -> NodeId {
        let xv = self.value(x);
        let mut out = Tensor::zeros(ids.len(), xv.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(xv.row(id));
        }
        self.push(out, Op::Gather { x, ids: ids.to_vec() })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul_bt(self.value(a), self.value(b));
        self.push(v, Op::MatMulBt(a, b))
    }

    /// `aᵀ · b`
    pub fn matmul_at(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).rows(), self.value(b).rows(), "matmul_at row mismatch");
        let v = matmul_at(self.value(a), self.value(b));
        self.push(v, Op::MatMulAt(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape mismatch");
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let r = self.value(row);
        assert_eq!(r.rows(), 1);
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width mismatch");
        let mut v = self.value(a).clone();
        let rv = r.data().to_vec();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(&rv) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shape mismatch");
        let bv = self.value(b).data().to_vec();
        let mut v = self.value(a).clone();
        for (x, y) in v.data_mut().iter_mut().zip(&bv) {
            *x *= y;
        }
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Affine(a, s))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(v, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut xhat = Tensor::zeros(n, d);
        let mut out = Tensor::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(i);
            for j in 0..d {
                xh[j] = (row[j] - mean) * is;
            }
            let o = out.row_mut(i);
            for j in 0..d {
                o[j] = xh[j] * g[j] + b[j];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Multi-head scaled dot-product attention on already projected
    /// queries, keys and values. Every query must see at least one key.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize, mask: &Mask) -> NodeId {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.shape();
        let m = kv.rows();
        assert_eq!(kv.cols(), d);
        assert_eq!(vv.shape(), (m, d));
        assert_eq!(d % heads, 0, "model width must divide into heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(n, d);
        let mut probs = Vec::with_capacity(heads);
        let mut scores = vec![0.0; m];
        for h in 0..heads {
            let off = h * dh;
            let mut p = Tensor::zeros(n, m);
            for i in 0..n {
                let qi = &qv.row(i)[off..off + dh];
                let mut max = f64::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate() {
                    if mask.allows(i, j) {
                        *s = dot(qi, &kv.row(j)[off..off + dh]) * scale;
                        max = max.max(*s);
                    } else {
                        *s = f64::NEG_INFINITY;
                    }
                }
                assert!(max.is_finite(), "attention row {i} has no visible keys");
                let pr = p.row_mut(i);
                let mut z = 0.0;
                for j in 0..m {
                    let e = if scores[j].is_finite() { (scores[j] - max).exp() } else { 0.0 };
                    pr[j] = e;
                    z += e;
                }
                for x in pr.iter_mut() {
                    *x /= z;
                }
                let orow = &mut out.row_mut(i)[off..off + dh];
                for (j, &pij) in pr.iter().enumerate() {
                    if pij == 0.0 {
                        continue;
                    }
                    let vj = &vv.row(j)[off..off + dh];
                    for (o, &x) in orow.iter_mut().zip(vj) {
                        *o += pij * x;
                    }
                }
            }
            probs.push(p);
        }
        self.push(out, Op::Attention { q, k, v, heads, probs })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let n = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(n, total);
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            assert_eq!(pv.rows(), n, "concat_cols row mismatch");
            for i in 0..n {
                out.row_mut(i)[off..off + w].copy_from_slice(pv.row(i));
            }
            off += w;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let d = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), d, "concat_rows width mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        self.push(Tensor::from_vec(rows, d, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(x).slice_rows(start, len);
        self.push(v, Op::SliceRows { x, start })
    }

    /// Column sums as a `1 x cols` row.
    pub fn sum_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut out = Tensor::zeros(1, xv.cols());
        for i in 0..xv.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        self.push(out, Op::SumRows(x))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    /// Sum over rows of `-log softmax(logits_i)[targets_i]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "one target per logit row");
        let mut probs = Tensor::zeros(lv.rows(), lv.cols());
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = lv.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + z.ln();
            loss += log_z - row[t];
            for (p, v) in probs.row_mut(i).iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
        }
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Binary negative log-likelihood of probabilities clamped to
    /// `[eps, 1 - eps]`, summed over entries.
    pub fn bce(&mut self, p: NodeId, targets: &[f64], eps: f64) -> NodeId {
        let pv = self.value(p);
        assert_eq!(pv.len(), targets.len(), "one target per probability");
        let loss: f64 = pv
            .data()
            .iter()
            .zip(targets)
            .map(|(&p, &y)| {
                let pc = p.clamp(eps, 1.0 - eps);
                -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
            })
            .sum();
        self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                targets: targets.to_vec(),
                eps,
            },
        )
    }

    /// `(cx, cy, w, h)` row to clipped corner-form box row.
    pub fn center_size_to_box(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).data().to_vec();
        assert_eq!(v.len(), 4);
        let b = BBox::from_center_size(v[0], v[1], v[2], v[3]);
        self.push(Tensor::row_vector(b.to_array().to_vec()), Op::CenterSizeToBox(x))
    }

    /// `l1_weight * L1(pred, target) + giou_weight * (1 - GIoU(pred, target))`.
    pub fn box_loss(&mut self, pred: NodeId, target: BBox, l1_weight: f64, giou_weight: f64) -> NodeId {
        let p = BBox::from_array(row4(self.value(pred)));
        let l1 = geometry::l1_distance(&p, &target);
        let g = geometry::giou(&p, &target);
        self.push(
            Tensor::scalar(l1_weight * l1 + giou_weight * (1.0 - g)),
            Op::BoxLoss {
                pred,
                target,
                l1_weight,
                giou_weight,
            },
        )
    }

    /// Covered fraction of each box by the region, as an `m x 1` column.
    pub fn overlap(&mut self, region: NodeId, boxes: &[BBox]) -> NodeId {
        let r = BBox::from_array(row4(self.value(region)));
        let v: Vec<f64> = boxes.iter().map(|b| geometry::iou_hat(&r, b)).collect();
        self.push(
            Tensor::column(v),
            Op::Overlap {
                region,
                boxes: boxes.to_vec(),
            },
        )
    }

    /// `switch * visual + (1 - switch) * linguistic` with a 1x1 switch.
    pub fn mix(&mut self, switch: NodeId, visual: NodeId, linguistic: NodeId) -> NodeId {
        let s = self.value(switch).item();
        let (vv, lv) = (self.value(visual), self.value(linguistic));
        assert_eq!(vv.shape(), lv.shape(), "mix shape mismatch");
        let data = vv
            .data()
            .iter()
            .zip(lv.data())
            .map(|(&pv, &pl)| s * pv + (1.0 - s) * pl)
            .collect();
        let out = Tensor::from_vec(vv.rows(), vv.cols(), data);
        self.push(
            out,
            Op::Mix {
                switch,
                visual,
                linguistic,
            },
        )
    }

    /// Backpropagates from the scalar node `loss` and accumulates into `grads`.
    pub fn backward(&self, loss: NodeId, grads: &mut Grads) {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut g: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        g.resize_with(loss.0 + 1, || None);
        g[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(dy) = g[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => grads.accumulate(*pid, &dy),
                Op::Embed { table, ids } => {
                    let t = self.store.get(*table);
                    let slot = grads.slot(*table, t.rows(), t.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (s, d) in slot.row_mut(id).iter_mut().zip(dy.row(r)) {
                            *s += d;
                        }
                    }
                }
                Op::Gather { x, ids } => {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (s, d) in dx.row_mut(id).iter_mut().zip(dy.row(r)) {
                            *s += d;
                        }
                    }
                    acc(&mut g, *x, dx);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = matmul_bt(&dy, bv);
                    acc(&mut g, *a, da);
                    let db = matmul_at(av, &dy);
                    acc(&mut g, *b, db);
                }
                Op::MatMulBt(a, b) => {
                    // y = a bᵀ: da = dy b, db = dyᵀ a
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut g, *a, matmul(&dy, bv));
                    acc(&mut g, *b, matmul_at(&dy, av));
                }
                Op::MatMulAt(a, b) => {
                    // y = aᵀ b: da = b dyᵀ, db = a dy
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut g, *a, matmul_bt(bv, &dy));
                    acc(&mut g, *b, matmul(av, &dy));
                }
                Op::Add(a, b) => {
                    acc(&mut g, *b, dy.clone());
                    acc(&mut g, *a, dy);
                }
                Op::AddRow(a, row) => {
                    let mut dr = Tensor::zeros(1, dy.cols());
                    for i in 0..dy.rows() {
                        for (s, d) in dr.data_mut().iter_mut().zip(dy.row(i)) {
                            *s += d;
                        }
                    }
                    acc(&mut g, *row, dr);
                    acc(&mut g, *a, dy);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = dy.clone();
                    for (x, y) in da.data_mut().iter_mut().zip(bv.data()) {
                        *x *= y;
                    }
                    let mut db = dy;
                    for (x, y) in db.data_mut().iter_mut().zip(av.data()) {
                        *x *= y;
                    }
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::Affine(a, s) => {
                    let mut d = dy;
                    d.scale_in_place(*s);
                    acc(&mut g, *a, d);
                }
                Op::Sigmoid(a) => {
                    let mut d = dy;
                    for (x, &y) in d.data_mut().iter_mut().zip(node.value.data()) {
                        *x *= y * (1.0 - y);
                    }
                    acc(&mut g, *a, d);
                }
                Op::Gelu(a) => {
                    let mut d = dy;
                    for (x, &v) in d.data_mut().iter_mut().zip(self.value(*a).data()) {
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        *x *= 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                    }
                    acc(&mut g, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma).data();
                    let (n, d) = dy.shape();
                    let mut dx = Tensor::zeros(n, d);
                    let mut dgamma = Tensor::zeros(1, d);
                    let mut dbeta = Tensor::zeros(1, d);
                    let mut dxh = vec![0.0; d];
                    for i in 0..n {
                        let dyr = dy.row(i);
                        let xh = xhat.row(i);
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            dgamma.data_mut()[j] += dyr[j] * xh[j];
                            dbeta.data_mut()[j] += dyr[j];
                            dxh[j] = dyr[j] * gv[j];
                            s1 += dxh[j];
                            s2 += dxh[j] * xh[j];
                        }
                        let k = inv_std[i] / d as f64;
                        let dxr = dx.row_mut(i);
                        for j in 0..d {
                            dxr[j] = k * (d as f64 * dxh[j] - s1 - xh[j] * s2);
                        }
                    }
                    acc(&mut g, *x, dx);
                    acc(&mut g, *gamma, dgamma);
                    acc(&mut g, *beta, dbeta);
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (n, d) = qv.shape();
                    let m = kv.rows();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Tensor::zeros(n, d);
                    let mut dk = Tensor::zeros(m, d);
                    let mut dv = Tensor::zeros(m, d);
                    let mut dp = vec![0.0; m];
                    for (h, p) in probs.iter().enumerate() {
                        let off = h * dh;
                        for i in 0..n {
                            let dyi = &dy.row(i)[off..off + dh];
                            let pr = p.row(i);
                            let mut rowdot = 0.0;
                            for j in 0..m {
                                if pr[j] == 0.0 {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                dp[j] = dot(dyi, &vv.row(j)[off..off + dh]);
                                rowdot += dp[j] * pr[j];
                                let dvj = &mut dv.row_mut(j)[off..off + dh];
                                for (o, &x) in dvj.iter_mut().zip(dyi) {
                                    *o += pr[j] * x;
                                }
                            }
                            let qi: Vec<f64> = qv.row(i)[off..off + dh].to_vec();
                            for j in 0..m {
                                if pr[j] == 0.0 {
                                    continue;
                                }
                                let ds = pr[j] * (dp[j] - rowdot) * scale;
                                let kj = &kv.row(j)[off..off + dh];
                                let dqi = &mut dq.row_mut(i)[off..off + dh];
                                for (o, &x) in dqi.iter_mut().zip(kj) {
                                    *o += ds * x;
                                }
                                let dkj = &mut dk.row_mut(j)[off..off + dh];
                                for (o, &x) in dkj.iter_mut().zip(&qi) {
                                    *o += ds * x;
                                }
                            }
                        }
                    }
                    acc(&mut g, *q, dq);
                    acc(&mut g, *k, dk);
                    acc(&mut g, *v, dv);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut dp = Tensor::zeros(dy.rows(), w);
                        for i in 0..dy.rows() {
                            dp.row_mut(i).copy_from_slice(&dy.row(i)[off..off + w]);
                        }
                        off += w;
                        acc(&mut g, p, dp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let r = self.value(p).rows();
                        acc(&mut g, p, dy.slice_rows(start, r));
                        start += r;
                    }
                }
                Op::SliceRows { x, start } => {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    let w = xv.cols();
                    dx.data_mut()[start * w..(start + dy.rows()) * w].copy_from_slice(dy.data());
                    acc(&mut g, *x, dx);
                }
                Op::SumRows(x) => {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    for i in 0..xv.rows() {
                        dx.row_mut(i).copy_from_slice(dy.data());
                    }
                    acc(&mut g, *x, dx);
                }
                Op::SumAll(x) => {
                    let xv = self.value(*x);
                    acc(&mut g, *x, Tensor::full(xv.rows(), xv.cols(), dy.item()));
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let s = dy.item();
                    let mut dl = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        dl.row_mut(i)[t] -= 1.0;
                    }
                    dl.scale_in_place(s);
                    acc(&mut g, *logits, dl);
                }
                Op::Bce { p, targets, eps } => {
                    let s = dy.item();
                    let pv = self.value(*p);
                    let data = pv
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&p, &y)| {
                            if p <= *eps || p >= 1.0 - eps {
                                0.0
                            } else {
                                s * (-y / p + (1.0 - y) / (1.0 - p))
                            }
                        })
                        .collect();
                    acc(&mut g, *p, Tensor::from_vec(pv.rows(), pv.cols(), data));
                }
                Op::CenterSizeToBox(x) => {
                    let c = self.value(*x).data();
                    let d = dy.data();
                    let interior = |v: f64| v > 0.0 && v < 1.0;
                    let mut dx = [0.0; 4];
                    // corner k = center ± size / 2, zero gradient when clipped
                    let raw = [
                        c[0] - 0.5 * c[2],
                        c[1] - 0.5 * c[3],
                        c[0] + 0.5 * c[2],
                        c[1] + 0.5 * c[3],
                    ];
                    for k in 0..4 {
                        if !interior(raw[k]) {
                            continue;
                        }
                        let axis = k % 2;
                        let sign = if k < 2 { -0.5 } else { 0.5 };
                        dx[axis] += d[k];
                        dx[axis + 2] += sign * d[k];
                    }
                    acc(&mut g, *x, Tensor::row_vector(dx.to_vec()));
                }
                Op::BoxLoss {
                    pred,
                    target,
                    l1_weight,
                    giou_weight,
                } => {
                    let s = dy.item();
                    let p = BBox::from_array(row4(self.value(*pred)));
                    let (_, gl1) = geometry::l1_with_grad(&p, target);
                    let (_, gg) = geometry::giou_with_grad(&p, target);
                    let d: Vec<f64> = (0..4)
                        .map(|k| s * (l1_weight * gl1[k] - giou_weight * gg[k]))
                        .collect();
                    acc(&mut g, *pred, Tensor::row_vector(d));
                }
                Op::Overlap { region, boxes } => {
                    let r = BBox::from_array(row4(self.value(*region)));
                    let mut d = [0.0; 4];
                    for (b, &up) in boxes.iter().zip(dy.data()) {
                        if up == 0.0 {
                            continue;
                        }
                        let (_, gb) = geometry::iou_hat_with_grad(&r, b);
                        for k in 0..4 {
                            d[k] += up * gb[k];
                        }
                    }
                    acc(&mut g, *region, Tensor::row_vector(d.to_vec()));
                }
                Op::Mix {
                    switch,
                    visual,
                    linguistic,
                } => {
                    let s = self.value(*switch).item();
                    let (vv, lv) = (self.value(*visual), self.value(*linguistic));
                    let ds: f64 = dy
                        .data()
                        .iter()
                        .zip(vv.data().iter().zip(lv.data()))
                        .map(|(d, (pv, pl))| d * (pv - pl))
                        .sum();
                    let mut dv = dy.clone();
                    dv.scale_in_place(s);
                    let mut dl = dy;
                    dl.scale_in_place(1.0 - s);
                    acc(&mut g, *switch, Tensor::scalar(ds));
                    acc(&mut g, *visual, dv);
                    acc(&mut g, *linguistic, dl);
                }
            }
        }
    }
}

fn row4(t: &Tensor) -> [f64; 4] {
    let d = t.data();
    assert_eq!(d.len(), 4, "box node must hold 4 values");
    [d[0], d[1], d[2], d[3]]
}

fn acc(g: &mut [Option<Tensor>], id: NodeId, d: Tensor) {
    match &mut g[id.0] {
        Some(t) => t.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Builds a scalar loss exercising every op from the given store.
    fn probe_loss<'p>(g: &mut Graph<'p>, ids: &[ParamId]) -> NodeId {
        let x = g.param(ids[0]); // 5x8
        let w = g.param(ids[1]); // 8x8
        let b = g.param(ids[2]); // 1x8
        let h = g.matmul(x, w);
        let h = g.add_row(h, b);
        let gamma = g.param(ids[3]);
        let beta = g.param(ids[4]);
        let h = g.layer_norm(h, gamma, beta);
        let a = g.attention(h, h, h, 2, &Mask::Causal);
        let e = g.embed(ids[5], &[1, 3, 1, 0, 2]);
        let e = g.gather_rows(e, &[4, 0, 1, 1, 2]);
        let h2 = g.add(a, e);
        let h2 = g.gelu(h2);
        let m = g.mul(h2, h);
        let c = g.concat_cols(&[m, h]);
        let top = g.slice_rows(c, 1, 3);
        let out = g.param(ids[6]);
        let logits = g.matmul_bt(top, out);
        let ce = g.cross_entropy(logits, &[0, 2, 1]);
        let s = g.sum_rows(h2);
        let s = g.scale(s, 0.3);
        let pcol = g.matmul_at(s, s); // 8x8
        let pcol = g.slice_rows(pcol, 0, 1);
        let z = g.sum_all(pcol);
        let r = g.concat_rows(&[ce, z]);
        let r = g.sigmoid(r);
        let tot = g.sum_all(r);
        // box branch
        let bx = g.param(ids[7]); // 1x4 logits
        let bx = g.sigmoid(bx);
        let region = g.center_size_to_box(bx);
        let boxes = [BBox::new(0.2, 0.3, 0.5, 0.45), BBox::new(0.4, 0.1, 0.7, 0.6)];
        let pv = g.overlap(region, &boxes);
        let pl = g.param(ids[8]);
        let pl = g.sigmoid(pl);
        let sw = g.slice_rows(r, 0, 1);
        let pw = g.mix(sw, pv, pl);
        let bce = g.bce(pw, &[1.0, 0.0], 1e-7);
        let bl = g.box_loss(region, BBox::new(0.3, 0.2, 0.6, 0.5), 5.0, 2.0);
        let t = g.concat_rows(&[tot, bce, bl]);
        g.sum_all(t)
    }

    #[test]
    fn every_op_passes_finite_difference_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let ids = vec![
            store.add_uniform("x", 5, 8, 1.0, &mut rng),
            store.add_uniform("w", 8, 8, 0.5, &mut rng),
            store.add_uniform("b", 1, 8, 0.5, &mut rng),
            store.add_uniform("gamma", 1, 8, 1.0, &mut rng),
            store.add_uniform("beta", 1, 8, 0.5, &mut rng),
            store.add_uniform("emb", 4, 8, 0.5, &mut rng),
            store.add_uniform("out", 6, 16, 0.5, &mut rng),
            store.add("box", Tensor::row_vector(vec![0.1, -0.2, -0.4, -0.3])),
            store.add_uniform("pl", 2, 1, 1.0, &mut rng),
        ];
        let mut grads = Grads::new(&store);
        {
            let mut g = Graph::new(&store);
            let loss = probe_loss(&mut g, &ids);
            g.backward(loss, &mut grads);
        }
        let eval = |s: &ParamStore| {
            let mut g = Graph::new(s);
            let l = probe_loss(&mut g, &ids);
            g.value(l).item()
        };
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for flat in 0..store.num_scalars() {
            let (id, off) = store.locate(flat);
            let orig = store.get(id).data()[off];
            let mut s = store.clone();
            s.get_mut(id).data_mut()[off] = orig + eps;
            let up = eval(&s);
            s.get_mut(id).data_mut()[off] = orig - eps;
            let down = eval(&s);
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads.flat_value(&store, flat);
            let err = (numeric - analytic).abs();
            let tol = 1e-5 * numeric.abs().max(analytic.abs()) + 1e-9;
            worst = worst.max(err / tol);
            assert!(
                err <= tol,
                "{}[{off}]: analytic {analytic} numeric {numeric}",
                store.name(id)
            );
        }
        assert!(worst <= 1.0);
    }

    #[test]
    fn masked_keys_get_zero_attention() {
        let mut store = ParamStore::new();
        let q = store.add("q", Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let mut g = Graph::new(&store);
        let qn = g.param(q);
        let a = g.attention(qn, qn, qn, 1, &Mask::Keys(vec![true, false]));
        // only key 0 is visible, so both rows copy value row 0
        assert_eq!(g.value(a).data(), &[1.0, 0.0, 1.0, 0.0]);
    }
}
