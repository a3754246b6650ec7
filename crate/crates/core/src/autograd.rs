//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records one forward pass. Parameters enter the tape once per
//! graph, so every use of a tied tensor accumulates into the same gradient.

use std::collections::HashMap;

use rand::Rng;

use crate::rng::LabRng;
use crate::tensor::{gelu, gelu_grad, gemm, layer_norm, log_softmax, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Rows `q0..q0+qn` of the queries attend to rows `k0..k0+kn` of keys/values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnSeg {
    pub q0: usize,
    pub qn: usize,
    pub k0: usize,
    pub kn: usize,
}

impl AttnSeg {
    pub fn square(start: usize, len: usize) -> Self {
        Self { q0: start, qn: len, k0: start, kn: len }
    }
}

pub const BCE_CLAMP: f64 = 1e-7;

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddBias { x: Var, b: Var },
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    LayerNorm { x: Var, g: Var, b: Var, xhat: Matrix, inv: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, segs: Vec<AttnSeg>, causal: bool, probs: Vec<Vec<f64>> },
    Gather { table: Var, ids: Vec<usize> },
    SelectRows { x: Var, rows: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, smoothing: f64, probs: Matrix },
    Bce { logits: Var, labels: Vec<f64>, probs: Vec<f64>, clamped: Vec<bool> },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
    param_of: HashMap<usize, usize>,
    grad_enabled: bool,
    dropout_rng: Option<LabRng>,
    clamp_count: usize,
}

/// Gradients produced by [`Graph::backward`], keyed by parameter id and by
/// gradient-requiring leaf.
#[derive(Debug, Default)]
pub struct Grads {
    pub params: Vec<(usize, Matrix)>,
    leaves: HashMap<usize, Matrix>,
}

impl Grads {
    pub fn leaf(&self, v: Var) -> Option<&Matrix> {
        self.leaves.get(&v.0)
    }

    pub fn param(&self, id: usize) -> Option<&Matrix> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, m)| m)
    }
}

impl Graph {
    /// `grad_enabled = false` builds an inference tape that never allocates
    /// gradients. Dropout is active only when an RNG is supplied.
    pub fn new(grad_enabled: bool, dropout_rng: Option<LabRng>) -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            param_of: HashMap::new(),
            grad_enabled,
            dropout_rng,
            clamp_count: 0,
        }
    }

    pub fn inference() -> Self {
        Self::new(false, None)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    /// Number of BCE probabilities that hit the clamp so far.
    pub fn clamp_count(&self) -> usize {
        self.clamp_count
    }

    pub fn training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad: needs_grad && self.grad_enabled });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A non-parameter leaf whose gradient is reported by `backward`.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Inserts parameter `id` once; later calls return the same node.
    pub fn param(&mut self, id: usize, value: &Matrix, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, trainable);
        self.params.insert(id, v);
        self.param_of.insert(v.0, id);
        v
    }

    pub fn param_var(&self, id: usize) -> Option<Var> {
        self.params.get(&id).copied()
    }

    pub fn matmul(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let out = Matrix::matmul(self.value(a), ta, self.value(b), tb);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Adds a `1 × n` bias row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let mut out = self.value(x).clone();
        let bias = &self.value(b).data;
        assert_eq!(bias.len(), out.cols, "bias width");
        for r in out.data.chunks_mut(bias.len().max(1)) {
            for (o, bv) in r.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(out, Op::AddBias { x, b }, ng)
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, false, w, false);
        match b {
            Some(b) => self.add_bias(y, b),
            None => y,
        }
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale(s);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let out = Matrix::from_vec(src.rows, src.cols, src.data.iter().map(|&v| gelu(v)).collect());
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let out = Matrix::from_vec(src.rows, src.cols, src.data.iter().map(|&v| v.max(0.0)).collect());
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Var {
        let (y, xhat, inv) = layer_norm(self.value(x), &self.value(g).data, &self.value(b).data);
        let ng = self.ng(x) || self.ng(g) || self.ng(b);
        self.push(y, Op::LayerNorm { x, g, b, xhat, inv }, ng)
    }

    /// Multi-head scaled dot-product attention over packed rows. `q`, `k`, `v`
    /// have already been projected; heads split the columns evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segs: &[AttnSeg], causal: bool) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let d = qm.cols;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(qm.rows, d);
        let mut probs = Vec::with_capacity(segs.len() * heads);
        for s in segs {
            if causal {
                assert_eq!(s.qn, s.kn, "causal attention needs square segments");
            }
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let mut p = vec![0.0; s.qn * s.kn];
                for i in 0..s.qn {
                    let qi = &qm.row(s.q0 + i)[cols.clone()];
                    let lim = if causal { i + 1 } else { s.kn };
                    let row = &mut p[i * s.kn..(i + 1) * s.kn];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..lim {
                        let kj = &km.row(s.k0 + j)[cols.clone()];
                        let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                        row[j] = dot * scale;
                        mx = mx.max(row[j]);
                    }
                    let mut z = 0.0;
                    for x in row[..lim].iter_mut() {
                        *x = (*x - mx).exp();
                        z += *x;
                    }
                    for x in row[..lim].iter_mut() {
                        *x /= z;
                    }
                    let o = &mut out.data[(s.q0 + i) * d + h * dh..(s.q0 + i) * d + (h + 1) * dh];
                    for j in 0..lim {
                        let vj = &vm.row(s.k0 + j)[cols.clone()];
                        let pj = row[j];
                        for (a, b) in o.iter_mut().zip(vj) {
                            *a += pj * b;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(out, Op::Attention { q, k, v, heads, segs: segs.to_vec(), causal, probs }, ng)
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Var {
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let out = self.value(table).select_rows(&ids);
        let ng = self.ng(table);
        self.push(out, Op::Gather { table, ids }, ng)
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let out = self.value(x).select_rows(rows);
        let ng = self.ng(x);
        self.push(out, Op::SelectRows { x, rows: rows.to_vec() }, ng)
    }

    /// Inverted dropout; the identity when the graph is not training or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if p <= 0.0 {
            return x;
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return x;
        };
        let n = self.nodes[x.0].value.len();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let src = &self.nodes[x.0].value;
        let out = Matrix::from_vec(src.rows, src.cols, src.data.iter().zip(&mask).map(|(a, m)| a * m).collect());
        let ng = self.ng(x);
        self.push(out, Op::Dropout { x, mask }, ng)
    }

    /// Mean over rows of the label-smoothed negative log-likelihood of
    /// `targets`; `smoothing = 0` gives plain NLL.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], smoothing: f64) -> Var {
        let lm = self.value(logits);
        assert_eq!(lm.rows, targets.len(), "one target per logit row");
        let v = lm.cols as f64;
        let mut probs = Matrix::zeros(lm.rows, lm.cols);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let lp = log_softmax(lm.row(i));
            let nll = -lp[t as usize];
            let row_loss = if smoothing > 0.0 {
                let smooth = -lp.iter().sum::<f64>() / v;
                (1.0 - smoothing) * nll + smoothing * smooth
            } else {
                nll
            };
            total += row_loss;
            for (p, l) in probs.row_mut(i).iter_mut().zip(&lp) {
                *p = l.exp();
            }
        }
        let n = targets.len().max(1) as f64;
        let ng = self.ng(logits);
        let targets = targets.iter().map(|&t| t as usize).collect();
        self.push(Matrix::scalar(total / n), Op::CrossEntropy { logits, targets, smoothing, probs }, ng)
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `labels`
    /// (1 = positive class); probabilities are clamped to `[1e-7, 1 − 1e-7]`.
    pub fn bce(&mut self, logits: Var, labels: &[f64]) -> Var {
        let lm = self.value(logits);
        assert_eq!(lm.len(), labels.len(), "one label per logit");
        let mut probs = Vec::with_capacity(labels.len());
        let mut clamped = Vec::with_capacity(labels.len());
        let mut total = 0.0;
        for (&z, &y) in lm.data.iter().zip(labels) {
            let raw = 1.0 / (1.0 + (-z).exp());
            let p = raw.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            clamped.push(p != raw);
            total += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            probs.push(p);
        }
        self.clamp_count += clamped.iter().filter(|&&c| c).count();
        let n = labels.len().max(1) as f64;
        let ng = self.ng(logits);
        self.push(Matrix::scalar(total / n), Op::Bce { logits, labels: labels.to_vec(), probs, clamped }, ng)
    }

    /// `Σ w_i · x_i` over scalar nodes, summed in the given order.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut total = 0.0;
        for &(v, w) in terms {
            total += w * self.scalar(v);
        }
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        self.push(Matrix::scalar(total), Op::WeightedSum(terms.to_vec()), ng)
    }

    /// Reverse pass from scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Grads::default();
        }
        grads[loss.0] = Some(Matrix::scalar(1.0));
        let mut out = Grads::default();
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    match self.param_of.get(&idx) {
                        Some(&pid) => out.params.push((pid, gy)),
                        None => {
                            out.leaves.insert(idx, gy);
                        }
                    }
                    continue;
                }
                _ => self.propagate(&node.op, &node.value, gy, &mut grads),
            }
        }
        out.params.sort_by_key(|p| p.0);
        out
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, value: &Matrix, gy: Matrix, grads: &mut [Option<Matrix>]) {
        match op {
            Op::Leaf => unreachable!(),
            Op::MatMul { a, b, ta, tb } => {
                let (am, bm) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    // C = op(A)·op(B): dA = dC·op(B)ᵀ, transposed back when A was.
                    let mut ga = Matrix::zeros(am.rows, am.cols);
                    if *ta {
                        gemm(1.0, bm, *tb, &gy, true, 0.0, &mut ga);
                    } else {
                        gemm(1.0, &gy, false, bm, !*tb, 0.0, &mut ga);
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    let mut gb = Matrix::zeros(bm.rows, bm.cols);
                    if *tb {
                        gemm(1.0, &gy, true, am, *ta, 0.0, &mut gb);
                    } else {
                        gemm(1.0, am, !*ta, &gy, false, 0.0, &mut gb);
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy);
            }
            Op::AddBias { x, b } => {
                if self.ng(*b) {
                    let mut gb = Matrix::zeros(1, gy.cols);
                    for r in 0..gy.rows {
                        for (o, v) in gb.data.iter_mut().zip(gy.row(r)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
                self.accumulate(grads, *x, gy);
            }
            Op::Scale(x, s) => {
                let mut g = gy;
                g.scale(*s);
                self.accumulate(grads, *x, g);
            }
            Op::Gelu(x) => {
                let xm = self.value(*x);
                let mut g = gy;
                for (gv, &xv) in g.data.iter_mut().zip(&xm.data) {
                    *gv *= gelu_grad(xv);
                }
                self.accumulate(grads, *x, g);
            }
            Op::Relu(x) => {
                let xm = self.value(*x);
                let mut g = gy;
                for (gv, &xv) in g.data.iter_mut().zip(&xm.data) {
                    if xv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::LayerNorm { x, g, b, xhat, inv } => {
                let gain = &self.value(*g).data;
                let d = gy.cols;
                if self.ng(*g) || self.ng(*b) {
                    let mut gg = Matrix::zeros(1, d);
                    let mut gb = Matrix::zeros(1, d);
                    for r in 0..gy.rows {
                        for j in 0..d {
                            gg.data[j] += gy.get(r, j) * xhat.get(r, j);
                            gb.data[j] += gy.get(r, j);
                        }
                    }
                    self.accumulate(grads, *g, gg);
                    self.accumulate(grads, *b, gb);
                }
                if self.ng(*x) {
                    let mut gx = Matrix::zeros(gy.rows, d);
                    for r in 0..gy.rows {
                        let dxh: Vec<f64> = (0..d).map(|j| gy.get(r, j) * gain[j]).collect();
                        let m1 = dxh.iter().sum::<f64>() / d as f64;
                        let m2 = dxh.iter().zip(xhat.row(r)).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let out = gx.row_mut(r);
                        for j in 0..d {
                            out[j] = inv[r] * (dxh[j] - m1 - xhat.get(r, j) * m2);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Attention { q, k, v, heads, segs, causal, probs } => {
                self.attention_backward(*q, *k, *v, *heads, segs, *causal, probs, &gy, grads);
            }
            Op::Gather { table, ids } => {
                let tm = self.value(*table);
                let mut gt = Matrix::zeros(tm.rows, tm.cols);
                for (r, &id) in ids.iter().enumerate() {
                    for (o, v) in gt.row_mut(id).iter_mut().zip(gy.row(r)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *table, gt);
            }
            Op::SelectRows { x, rows } => {
                let xm = self.value(*x);
                let mut gx = Matrix::zeros(xm.rows, xm.cols);
                for (r, &src) in rows.iter().enumerate() {
                    for (o, v) in gx.row_mut(src).iter_mut().zip(gy.row(r)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Dropout { x, mask } => {
                let mut g = gy;
                for (gv, m) in g.data.iter_mut().zip(mask) {
                    *gv *= m;
                }
                self.accumulate(grads, *x, g);
            }
            Op::CrossEntropy { logits, targets, smoothing, probs } => {
                let scale = gy.data[0] / targets.len().max(1) as f64;
                let v = probs.cols as f64;
                let mut g = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let row = g.row_mut(r);
                    row[t] -= 1.0 - smoothing;
                    for x in row.iter_mut() {
                        *x = (*x - smoothing / v) * scale;
                    }
                }
                self.accumulate(grads, *logits, g);
            }
            Op::Bce { logits, labels, probs, clamped } => {
                let lm = self.value(*logits);
                let scale = gy.data[0] / labels.len().max(1) as f64;
                let data = probs
                    .iter()
                    .zip(labels)
                    .zip(clamped)
                    .map(|((p, y), &c)| if c { 0.0 } else { (p - y) * scale })
                    .collect();
                self.accumulate(grads, *logits, Matrix::from_vec(lm.rows, lm.cols, data));
            }
            Op::WeightedSum(terms) => {
                for &(t, w) in terms {
                    self.accumulate(grads, t, Matrix::scalar(w * gy.data[0]));
                }
            }
        }
        let _ = value;
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segs: &[AttnSeg],
        causal: bool,
        probs: &[Vec<f64>],
        gy: &Matrix,
        grads: &mut [Option<Matrix>],
    ) {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let d = qm.cols;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = Matrix::zeros(qm.rows, d);
        let mut gk = Matrix::zeros(km.rows, d);
        let mut gv = Matrix::zeros(vm.rows, d);
        for (si, s) in segs.iter().enumerate() {
            for h in 0..heads {
                let p = &probs[si * heads + h];
                let c0 = h * dh;
                for i in 0..s.qn {
                    let lim = if causal { i + 1 } else { s.kn };
                    let go = &gy.row(s.q0 + i)[c0..c0 + dh];
                    let prow = &p[i * s.kn..i * s.kn + lim];
                    let mut dp = vec![0.0; lim];
                    for j in 0..lim {
                        let vj = &vm.row(s.k0 + j)[c0..c0 + dh];
                        dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                        let gvr = &mut gv.data[(s.k0 + j) * d + c0..(s.k0 + j) * d + c0 + dh];
                        for (o, g) in gvr.iter_mut().zip(go) {
                            *o += prow[j] * g;
                        }
                    }
                    let dot: f64 = prow.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    let qi = &qm.row(s.q0 + i)[c0..c0 + dh];
                    for j in 0..lim {
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &km.row(s.k0 + j)[c0..c0 + dh];
                        let gqr = &mut gq.data[(s.q0 + i) * d + c0..(s.q0 + i) * d + c0 + dh];
                        for (o, kv) in gqr.iter_mut().zip(kj) {
                            *o += ds * kv;
                        }
                        let gkr = &mut gk.data[(s.k0 + j) * d + c0..(s.k0 + j) * d + c0 + dh];
                        for (o, qv) in gkr.iter_mut().zip(qi) {
                            *o += ds * qv;
                        }
                    }
                }
            }
        }
        self.accumulate(grads, q, gq);
        self.accumulate(grads, k, gk);
        self.accumulate(grads, v, gv);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randm(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut r = rng(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(&mut r)).collect())
    }

    /// Central-difference check of every input of a scalar-valued graph builder.
    fn check(inputs: Vec<Matrix>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new(true, None);
        let vars: Vec<Var> = inputs.iter().map(|m| g.input(m.clone())).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss);
        let eval = |inp: &[Matrix]| {
            let mut g = Graph::inference();
            let vars: Vec<Var> = inp.iter().map(|m| g.constant(m.clone())).collect();
            let l = build(&mut g, &vars);
            g.scalar(l)
        };
        let h = 1e-5;
        for (k, m) in inputs.iter().enumerate() {
            let an = grads.leaf(vars[k]).cloned().unwrap_or_else(|| Matrix::zeros(m.rows, m.cols));
            for i in 0..m.len() {
                let mut plus = inputs.clone();
                plus[k].data[i] += h;
                let mut minus = inputs.clone();
                minus[k].data[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = an.data[i];
                let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
                assert!(err < 1e-5, "input {k} elem {i}: analytic {a} vs fd {fd}");
            }
        }
    }

    #[test]
    fn matmul_all_transposes() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = if ta { randm(4, 3, 1) } else { randm(3, 4, 1) };
            let b = if tb { randm(2, 4, 2) } else { randm(4, 2, 2) };
            check(vec![a, b], |g, v| {
                let c = g.matmul(v[0], ta, v[1], tb);
                let t = g.gelu(c);
                g.cross_entropy(t, &[1, 0, 1], 0.0)
            });
        }
    }

    #[test]
    fn layer_norm_bias_relu_gelu() {
        check(vec![randm(3, 5, 3), randm(1, 5, 4), randm(1, 5, 5), randm(1, 5, 6)], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]);
            let y = g.add_bias(y, v[3]);
            let r = g.relu(y);
            let s = g.scale(r, 0.7);
            let z = g.add(s, y);
            g.cross_entropy(z, &[0, 4, 2], 0.1)
        });
    }

    #[test]
    fn attention_causal_and_cross() {
        let segs = [AttnSeg::square(0, 3), AttnSeg::square(3, 2)];
        check(vec![randm(5, 4, 7), randm(5, 4, 8), randm(5, 4, 9)], |g, v| {
            let a = g.attention(v[0], v[1], v[2], 2, &segs, true);
            g.cross_entropy(a, &[0, 1, 2, 3, 0], 0.0)
        });
        let segs = [AttnSeg { q0: 0, qn: 2, k0: 0, kn: 3 }, AttnSeg { q0: 2, qn: 3, k0: 3, kn: 1 }];
        check(vec![randm(5, 4, 10), randm(4, 4, 11), randm(4, 4, 12)], |g, v| {
            let a = g.attention(v[0], v[1], v[2], 2, &segs, false);
            g.cross_entropy(a, &[3, 1, 2, 0, 0], 0.0)
        });
    }

    #[test]
    fn gather_select_bce_weighted() {
        check(vec![randm(6, 3, 13), randm(3, 1, 14)], |g, v| {
            let e = g.gather(v[0], &[2, 5, 2, 0]);
            let s = g.select_rows(e, &[0, 2, 3]);
            let z = g.matmul(s, false, v[1], false);
            let b = g.bce(z, &[1.0, 0.0, 1.0]);
            let c = g.cross_entropy(s, &[0, 1, 2], 0.0);
            g.weighted_sum(&[(b, 25.0), (c, 1.0)])
        });
    }

    #[test]
    fn causal_rows_ignore_future() {
        let q = randm(4, 4, 20);
        let k = randm(4, 4, 21);
        let v = randm(4, 4, 22);
        let run = |v: &Matrix| {
            let mut g = Graph::inference();
            let (a, b, c) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
            let o = g.attention(a, b, c, 2, &[AttnSeg::square(0, 4)], true);
            g.value(o).clone()
        };
        let base = run(&v);
        let mut v2 = v.clone();
        v2.row_mut(3).iter_mut().for_each(|x| *x += 1.0);
        let moved = run(&v2);
        assert_eq!(base.data[..12], moved.data[..12]);
        assert_ne!(base.row(3), moved.row(3));
    }

    #[test]
    fn tied_parameter_accumulates() {
        let w = randm(3, 3, 30);
        let mut g = Graph::new(true, None);
        let p1 = g.param(7, &w, true);
        let p2 = g.param(7, &w, true);
        assert_eq!(p1, p2);
        let x = g.constant(randm(2, 3, 31));
        let a = g.matmul(x, false, p1, false);
        let b = g.matmul(a, false, p2, true);
        let l = g.cross_entropy(b, &[0, 2], 0.0);
        let grads = g.backward(l);
        assert_eq!(grads.params.len(), 1);
        assert_eq!(grads.params[0].0, 7);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut g = Graph::new(true, None);
        let w = g.param(1, &randm(3, 2, 40), false);
        let x = g.constant(randm(2, 3, 41));
        let y = g.matmul(x, false, w, false);
        let l = g.cross_entropy(y, &[0, 1], 0.0);
        assert!(g.backward(l).params.is_empty());
    }

    #[test]
    fn bce_clamps_and_counts() {
        let mut g = Graph::inference();
        let z = g.constant(Matrix::from_vec(2, 1, vec![80.0, -80.0]));
        let l = g.bce(z, &[1.0, 0.0]);
        assert_eq!(g.clamp_count(), 2);
        assert!(g.scalar(l) <= 1.2e-7);
    }
}
