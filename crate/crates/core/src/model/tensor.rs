//! Minimal reverse-mode autodiff on row-major 2D tensors.
//!
//! A `Tape` records every forward operation; `backward` replays them in
//! reverse and accumulates gradients into the parameter store. All math is
//! f64 so finite-difference gradient checks are meaningful at 1e-4 relative
//! tolerance.

/// Row-major 2D value.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// A trainable parameter with AdamW state.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    pub params: Vec<Param>,
    pub step: u64,
}

impl ParamStore {
    pub fn add(&mut self, name: &str, rows: usize, cols: usize, init: Vec<f64>) -> usize {
        assert_eq!(init.len(), rows * cols, "{name}: init size mismatch");
        self.params.push(Param {
            name: name.to_string(),
            rows,
            cols,
            value: init,
            grad: vec![0.0; rows * cols],
            m: vec![0.0; rows * cols],
            v: vec![0.0; rows * cols],
        });
        self.params.len() - 1
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// One AdamW update with decoupled weight decay.
    pub fn adamw_step(&mut self, lr: f64, weight_decay: f64) {
        const BETA1: f64 = 0.9;
        const BETA2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - BETA1.powf(t);
        let bc2 = 1.0 - BETA2.powf(t);
        for p in &mut self.params {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                p.m[i] = BETA1 * p.m[i] + (1.0 - BETA1) * g;
                p.v[i] = BETA2 * p.v[i] + (1.0 - BETA2) * g * g;
                let m_hat = p.m[i] / bc1;
                let v_hat = p.v[i] / bc2;
                p.value[i] -= lr * (m_hat / (v_hat.sqrt() + EPS) + weight_decay * p.value[i]);
            }
        }
    }
}

pub type NodeId = usize;

enum Op {
    /// Constant input or parameter leaf (param index).
    Leaf(Option<usize>),
    Add(NodeId, NodeId),
    /// (m,n) + (1,n) broadcast over rows.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    /// x, gain (1,n), bias (1,n).
    LayerNorm(NodeId, NodeId, NodeId),
    GatherRows(NodeId, Vec<usize>),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    /// Replace entries where mask is true with `fill`; gradient is blocked there.
    MaskFill(NodeId, Vec<bool>, f64),
    /// out[:, j] = in[:, perm[j]].
    PermuteCols(NodeId, Vec<usize>),
    /// Column-wise max over rows -> (1, n); argmax rows recorded at forward.
    MaxPoolRows(NodeId, Vec<usize>),
    /// Per-edge score contribution: out[i,j] = dot(q_i, rel[i*k + j]).
    EdgeScores { q: NodeId, rel: NodeId, keys: usize },
    /// Per-edge value mixing: out_i = sum_j p[i,j] * rel[i*k + j].
    EdgeMix { p: NodeId, rel: NodeId },
    /// Masked mean cross-entropy over rows of logits -> (1,1) scalar.
    CrossEntropy { logits: NodeId, targets: Vec<usize>, mask: Vec<f64>, softmax: Tensor },
}

struct Node {
    value: Tensor,
    grad: Vec<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let grad = vec![0.0; value.data.len()];
        self.nodes.push(Node { value, grad, op });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf(None))
    }

    pub fn param(&mut self, store: &ParamStore, idx: usize) -> NodeId {
        let p = &store.params[idx];
        self.push(
            Tensor::from_vec(p.rows, p.cols, p.value.clone()),
            Op::Leaf(Some(idx)),
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols), "add shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let t = Tensor::from_vec(ta.rows, ta.cols, data);
        self.push(t, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (ta, tr) = (&self.nodes[a].value, &self.nodes[row].value);
        assert_eq!(tr.rows, 1);
        assert_eq!(ta.cols, tr.cols);
        let mut out = ta.clone();
        for r in 0..out.rows {
            for c in 0..out.cols {
                out.data[r * out.cols + c] += tr.data[c];
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let ta = &self.nodes[a].value;
        let t = Tensor::from_vec(ta.rows, ta.cols, ta.data.iter().map(|x| x * k).collect());
        self.push(t, Op::Scale(a, k))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(ta.cols, tb.rows, "matmul inner dim mismatch");
        let (m, k, n) = (ta.rows, ta.cols, tb.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ta.data[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &tb.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        self.push(Tensor::from_vec(m, n, out), Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a].value;
        let mut out = Tensor::zeros(ta.cols, ta.rows);
        for r in 0..ta.rows {
            for c in 0..ta.cols {
                out.data[c * ta.rows + r] = ta.data[r * ta.cols + c];
            }
        }
        self.push(out, Op::Transpose(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a].value;
        let t = Tensor::from_vec(ta.rows, ta.cols, ta.data.iter().map(|&x| gelu(x)).collect());
        self.push(t, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a].value;
        let mut out = ta.clone();
        for r in 0..out.rows {
            let row = &mut out.data[r * out.cols..(r + 1) * out.cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let (tx, tg, tb) = (&self.nodes[x].value, &self.nodes[gain].value, &self.nodes[bias].value);
        assert_eq!(tg.cols, tx.cols);
        assert_eq!(tb.cols, tx.cols);
        let n = tx.cols as f64;
        let mut out = tx.clone();
        for r in 0..tx.rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            for c in 0..tx.cols {
                out.data[r * tx.cols + c] = (row[c] - mean) * inv * tg.data[c] + tb.data[c];
            }
        }
        self.push(out, Op::LayerNorm(x, gain, bias))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: Vec<usize>) -> NodeId {
        let ta = &self.nodes[a].value;
        let mut out = Tensor::zeros(idx.len(), ta.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.data[r * ta.cols..(r + 1) * ta.cols].copy_from_slice(ta.row(i));
        }
        self.push(out, Op::GatherRows(a, idx))
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.nodes[parts[0]].value.cols;
        let rows: usize = parts.iter().map(|&p| self.nodes[p].value.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in &parts {
            let t = &self.nodes[p].value;
            assert_eq!(t.cols, cols);
            data.extend_from_slice(&t.data);
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts))
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0]].value.rows;
        let cols: usize = parts.iter().map(|&p| self.nodes[p].value.cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in &parts {
            let t = &self.nodes[p].value;
            assert_eq!(t.rows, rows);
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + t.cols].copy_from_slice(t.row(r));
            }
            off += t.cols;
        }
        self.push(out, Op::ConcatCols(parts))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let ta = &self.nodes[a].value;
        let mut out = Tensor::zeros(ta.rows, len);
        for r in 0..ta.rows {
            out.data[r * len..(r + 1) * len].copy_from_slice(&ta.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start, len))
    }

    pub fn mask_fill(&mut self, a: NodeId, mask: Vec<bool>, fill: f64) -> NodeId {
        let ta = &self.nodes[a].value;
        assert_eq!(mask.len(), ta.data.len());
        let data = ta
            .data
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| if m { fill } else { x })
            .collect();
        let t = Tensor::from_vec(ta.rows, ta.cols, data);
        self.push(t, Op::MaskFill(a, mask, fill))
    }

    pub fn permute_cols(&mut self, a: NodeId, perm: Vec<usize>) -> NodeId {
        let ta = &self.nodes[a].value;
        assert_eq!(perm.len(), ta.cols);
        let mut out = Tensor::zeros(ta.rows, ta.cols);
        for r in 0..ta.rows {
            for (j, &src) in perm.iter().enumerate() {
                out.data[r * ta.cols + j] = ta.data[r * ta.cols + src];
            }
        }
        self.push(out, Op::PermuteCols(a, perm))
    }

    pub fn max_pool_rows(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a].value;
        let mut out = Tensor::zeros(1, ta.cols);
        let mut arg = vec![0usize; ta.cols];
        for c in 0..ta.cols {
            let mut best = f64::NEG_INFINITY;
            for r in 0..ta.rows {
                let v = ta.at(r, c);
                if v > best {
                    best = v;
                    arg[c] = r;
                }
            }
            out.data[c] = best;
        }
        self.push(out, Op::MaxPoolRows(a, arg))
    }

    /// Relation-augmented attention scores: given queries `q` (m, d) and
    /// per-edge relation vectors `rel` (m*k, d), produce (m, k) with
    /// out[i,j] = dot(q_i, rel[i*k+j]).
    pub fn edge_scores(&mut self, q: NodeId, rel: NodeId, keys: usize) -> NodeId {
        let (tq, tr) = (&self.nodes[q].value, &self.nodes[rel].value);
        assert_eq!(tq.cols, tr.cols);
        assert_eq!(tr.rows, tq.rows * keys);
        let d = tq.cols;
        let mut out = Tensor::zeros(tq.rows, keys);
        for i in 0..tq.rows {
            let qrow = tq.row(i);
            for j in 0..keys {
                let rrow = tr.row(i * keys + j);
                out.data[i * keys + j] = qrow.iter().zip(rrow).map(|(a, b)| a * b).sum();
            }
        }
        let _ = d;
        self.push(out, Op::EdgeScores { q, rel, keys })
    }

    /// Per-edge value mixing: given attention weights `p` (m, k) and per-edge
    /// vectors `rel` (m*k, d), produce (m, d) with out_i = sum_j p[i,j] rel[i*k+j].
    pub fn edge_mix(&mut self, p: NodeId, rel: NodeId) -> NodeId {
        let (tp, tr) = (&self.nodes[p].value, &self.nodes[rel].value);
        let (m, k) = (tp.rows, tp.cols);
        assert_eq!(tr.rows, m * k);
        let d = tr.cols;
        let mut out = Tensor::zeros(m, d);
        for i in 0..m {
            for j in 0..k {
                let w = tp.at(i, j);
                if w == 0.0 {
                    continue;
                }
                let rrow = tr.row(i * k + j);
                let orow = &mut out.data[i * d..(i + 1) * d];
                for c in 0..d {
                    orow[c] += w * rrow[c];
                }
            }
        }
        self.push(out, Op::EdgeMix { p, rel })
    }

    /// Masked mean cross-entropy: sum_i mask_i * CE(row_i, target_i) / sum mask.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<usize>, mask: Vec<f64>) -> NodeId {
        let tl = &self.nodes[logits].value;
        assert_eq!(targets.len(), tl.rows);
        assert_eq!(mask.len(), tl.rows);
        let mask_sum: f64 = mask.iter().sum();
        assert!(mask_sum > 0.0, "cross_entropy: empty mask");
        let mut softmax = tl.clone();
        let mut total = 0.0;
        for r in 0..tl.rows {
            let row = &mut softmax.data[r * tl.cols..(r + 1) * tl.cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
            if mask[r] > 0.0 {
                total += mask[r] * (-row[targets[r]].max(1e-300).ln());
            }
        }
        let value = Tensor::from_vec(1, 1, vec![total / mask_sum]);
        self.push(value, Op::CrossEntropy { logits, targets, mask, softmax })
    }

    /// Backpropagate from a scalar node and accumulate parameter gradients
    /// into `store` (adds to existing grads).
    pub fn backward(&mut self, root: NodeId, store: &mut ParamStore) {
        assert_eq!(self.nodes[root].value.data.len(), 1, "backward root must be scalar");
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[root].grad[0] = 1.0;

        for id in (0..self.nodes.len()).rev() {
            if self.nodes[id].grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            let grad = std::mem::take(&mut self.nodes[id].grad);
            match &self.nodes[id].op {
                Op::Leaf(param) => {
                    if let Some(pi) = *param {
                        let pg = &mut store.params[pi].grad;
                        for (g, acc) in grad.iter().zip(pg.iter_mut()) {
                            *acc += g;
                        }
                    }
                    self.nodes[id].grad = grad;
                    continue;
                }
                _ => {}
            }
            // Split borrows: clone the light op metadata indices we need.
            match std::mem::replace(&mut self.nodes[id].op, Op::Leaf(None)) {
                Op::Leaf(_) => unreachable!(),
                Op::Add(a, b) => {
                    for (i, &g) in grad.iter().enumerate() {
                        self.nodes[a].grad[i] += g;
                        self.nodes[b].grad[i] += g;
                    }
                    self.nodes[id].op = Op::Add(a, b);
                }
                Op::AddRow(a, row) => {
                    let cols = self.nodes[id].value.cols;
                    for (i, &g) in grad.iter().enumerate() {
                        self.nodes[a].grad[i] += g;
                        self.nodes[row].grad[i % cols] += g;
                    }
                    self.nodes[id].op = Op::AddRow(a, row);
                }
                Op::Scale(a, k) => {
                    for (i, &g) in grad.iter().enumerate() {
                        self.nodes[a].grad[i] += g * k;
                    }
                    self.nodes[id].op = Op::Scale(a, k);
                }
                Op::MatMul(a, b) => {
                    let ta = self.nodes[a].value.clone();
                    let tb = self.nodes[b].value.clone();
                    let (m, k, n) = (ta.rows, ta.cols, tb.cols);
                    // dA = G * B^T
                    for i in 0..m {
                        for j in 0..n {
                            let g = grad[i * n + j];
                            if g == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                self.nodes[a].grad[i * k + p] += g * tb.data[p * n + j];
                            }
                        }
                    }
                    // dB = A^T * G
                    for p in 0..k {
                        for i in 0..m {
                            let av = ta.data[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                self.nodes[b].grad[p * n + j] += av * grad[i * n + j];
                            }
                        }
                    }
                    self.nodes[id].op = Op::MatMul(a, b);
                }
                Op::Transpose(a) => {
                    let (rows, cols) = (self.nodes[id].value.rows, self.nodes[id].value.cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            self.nodes[a].grad[c * rows + r] += grad[r * cols + c];
                        }
                    }
                    self.nodes[id].op = Op::Transpose(a);
                }
                Op::Gelu(a) => {
                    let ta = self.nodes[a].value.data.clone();
                    for (i, &g) in grad.iter().enumerate() {
                        self.nodes[a].grad[i] += g * gelu_grad(ta[i]);
                    }
                    self.nodes[id].op = Op::Gelu(a);
                }
                Op::SoftmaxRows(a) => {
                    let out = self.nodes[id].value.clone();
                    for r in 0..out.rows {
                        let row = out.row(r);
                        let grow = &grad[r * out.cols..(r + 1) * out.cols];
                        let dot: f64 = row.iter().zip(grow).map(|(p, g)| p * g).sum();
                        for c in 0..out.cols {
                            self.nodes[a].grad[r * out.cols + c] += row[c] * (grow[c] - dot);
                        }
                    }
                    self.nodes[id].op = Op::SoftmaxRows(a);
                }
                Op::LayerNorm(x, gain, bias) => {
                    let tx = self.nodes[x].value.clone();
                    let tg = self.nodes[gain].value.clone();
                    let n = tx.cols;
                    let nf = n as f64;
                    for r in 0..tx.rows {
                        let row = tx.row(r);
                        let mean = row.iter().sum::<f64>() / nf;
                        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf;
                        let inv = 1.0 / (var + 1e-5).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                        let grow = &grad[r * n..(r + 1) * n];
                        let mut sum_g = 0.0;
                        let mut sum_gx = 0.0;
                        for c in 0..n {
                            let gh = grow[c] * tg.data[c];
                            sum_g += gh;
                            sum_gx += gh * xhat[c];
                            self.nodes[gain].grad[c] += grow[c] * xhat[c];
                            self.nodes[bias].grad[c] += grow[c];
                        }
                        for c in 0..n {
                            let gh = grow[c] * tg.data[c];
                            self.nodes[x].grad[r * n + c] +=
                                inv * (gh - sum_g / nf - xhat[c] * sum_gx / nf);
                        }
                    }
                    self.nodes[id].op = Op::LayerNorm(x, gain, bias);
                }
                Op::GatherRows(a, idx) => {
                    let cols = self.nodes[id].value.cols;
                    for (r, &src) in idx.iter().enumerate() {
                        for c in 0..cols {
                            self.nodes[a].grad[src * cols + c] += grad[r * cols + c];
                        }
                    }
                    self.nodes[id].op = Op::GatherRows(a, idx);
                }
                Op::ConcatRows(parts) => {
                    let cols = self.nodes[id].value.cols;
                    let mut off = 0;
                    for &p in &parts {
                        let len = self.nodes[p].value.data.len();
                        for i in 0..len {
                            self.nodes[p].grad[i] += grad[off * cols + i];
                        }
                        off += self.nodes[p].value.rows;
                    }
                    self.nodes[id].op = Op::ConcatRows(parts);
                }
                Op::ConcatCols(parts) => {
                    let rows = self.nodes[id].value.rows;
                    let total_cols = self.nodes[id].value.cols;
                    let mut off = 0;
                    for &p in &parts {
                        let pc = self.nodes[p].value.cols;
                        for r in 0..rows {
                            for c in 0..pc {
                                self.nodes[p].grad[r * pc + c] += grad[r * total_cols + off + c];
                            }
                        }
                        off += pc;
                    }
                    self.nodes[id].op = Op::ConcatCols(parts);
                }
                Op::SliceCols(a, start, len) => {
                    let src_cols = self.nodes[a].value.cols;
                    let rows = self.nodes[id].value.rows;
                    for r in 0..rows {
                        for c in 0..len {
                            self.nodes[a].grad[r * src_cols + start + c] += grad[r * len + c];
                        }
                    }
                    self.nodes[id].op = Op::SliceCols(a, start, len);
                }
                Op::MaskFill(a, mask, fill) => {
                    for (i, &g) in grad.iter().enumerate() {
                        if !mask[i] {
                            self.nodes[a].grad[i] += g;
                        }
                    }
                    self.nodes[id].op = Op::MaskFill(a, mask, fill);
                }
                Op::PermuteCols(a, perm) => {
                    let cols = self.nodes[id].value.cols;
                    let rows = self.nodes[id].value.rows;
                    for r in 0..rows {
                        for (j, &src) in perm.iter().enumerate() {
                            self.nodes[a].grad[r * cols + src] += grad[r * cols + j];
                        }
                    }
                    self.nodes[id].op = Op::PermuteCols(a, perm);
                }
                Op::MaxPoolRows(a, arg) => {
                    let cols = self.nodes[id].value.cols;
                    for c in 0..cols {
                        self.nodes[a].grad[arg[c] * cols + c] += grad[c];
                    }
                    self.nodes[id].op = Op::MaxPoolRows(a, arg);
                }
                Op::EdgeScores { q, rel, keys } => {
                    let tq = self.nodes[q].value.clone();
                    let tr = self.nodes[rel].value.clone();
                    let d = tq.cols;
                    for i in 0..tq.rows {
                        for j in 0..keys {
                            let g = grad[i * keys + j];
                            if g == 0.0 {
                                continue;
                            }
                            let rrow = tr.row(i * keys + j);
                            for c in 0..d {
                                self.nodes[q].grad[i * d + c] += g * rrow[c];
                                self.nodes[rel].grad[(i * keys + j) * d + c] += g * tq.at(i, c);
                            }
                        }
                    }
                    self.nodes[id].op = Op::EdgeScores { q, rel, keys };
                }
                Op::EdgeMix { p, rel } => {
                    let tp = self.nodes[p].value.clone();
                    let tr = self.nodes[rel].value.clone();
                    let (m, k) = (tp.rows, tp.cols);
                    let d = tr.cols;
                    for i in 0..m {
                        let grow = &grad[i * d..(i + 1) * d];
                        for j in 0..k {
                            let rrow = tr.row(i * k + j);
                            let dot: f64 = grow.iter().zip(rrow).map(|(a, b)| a * b).sum();
                            self.nodes[p].grad[i * k + j] += dot;
                            let w = tp.at(i, j);
                            if w != 0.0 {
                                for c in 0..d {
                                    self.nodes[rel].grad[(i * k + j) * d + c] += w * grow[c];
                                }
                            }
                        }
                    }
                    self.nodes[id].op = Op::EdgeMix { p, rel };
                }
                Op::CrossEntropy { logits, targets, mask, softmax } => {
                    let g = grad[0];
                    let mask_sum: f64 = mask.iter().sum();
                    let cols = softmax.cols;
                    for r in 0..softmax.rows {
                        if mask[r] == 0.0 {
                            continue;
                        }
                        let w = g * mask[r] / mask_sum;
                        for c in 0..cols {
                            let mut d = softmax.at(r, c);
                            if c == targets[r] {
                                d -= 1.0;
                            }
                            self.nodes[logits].grad[r * cols + c] += w * d;
                        }
                    }
                    self.nodes[id].op = Op::CrossEntropy { logits, targets, mask, softmax };
                }
            }
            self.nodes[id].grad = grad;
        }
    }
}

/// Convenience: y = x W + b with W stored (in, out) and b (1, out).
pub fn linear(tape: &mut Tape, store: &ParamStore, x: NodeId, w: usize, b: usize) -> NodeId {
    let wn = tape.param(store, w);
    let bn = tape.param(store, b);
    let y = tape.matmul(x, wn);
    tape.add_row(y, bn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fd_check<F>(store: &mut ParamStore, f: F, tol: f64)
    where
        F: Fn(&ParamStore) -> (Tape, NodeId),
    {
        store.zero_grad();
        let (mut tape, root) = f(store);
        tape.backward(root, store);
        let h = 1e-5;
        for pi in 0..store.params.len() {
            for i in 0..store.params[pi].value.len() {
                let orig = store.params[pi].value[i];
                store.params[pi].value[i] = orig + h;
                let (t1, r1) = f(store);
                let up = t1.value(r1).data[0];
                store.params[pi].value[i] = orig - h;
                let (t2, r2) = f(store);
                let down = t2.value(r2).data[0];
                store.params[pi].value[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = store.params[pi].grad[i];
                let denom = fd.abs().max(an.abs()).max(1e-7);
                assert!(
                    (fd - an).abs() / denom < tol,
                    "param {} [{}]: fd={fd} analytic={an}",
                    store.params[pi].name,
                    i
                );
            }
        }
    }

    #[test]
    fn chain_of_ops_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::default();
        let w1 = store.add("w1", 4, 6, (0..24).map(|_| rng.gen_range(-0.5..0.5)).collect());
        let b1 = store.add("b1", 1, 6, (0..6).map(|_| rng.gen_range(-0.5..0.5)).collect());
        let g = store.add("g", 1, 6, (0..6).map(|_| rng.gen_range(0.5..1.5)).collect());
        let be = store.add("be", 1, 6, (0..6).map(|_| rng.gen_range(-0.5..0.5)).collect());
        let w2 = store.add("w2", 6, 5, (0..30).map(|_| rng.gen_range(-0.5..0.5)).collect());
        let b2 = store.add("b2", 1, 5, (0..5).map(|_| rng.gen_range(-0.5..0.5)).collect());
        let x = Tensor::from_vec(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect());

        fd_check(
            &mut store,
            |s| {
                let mut tape = Tape::new();
                let xn = tape.constant(x.clone());
                let h1 = linear(&mut tape, s, xn, w1, b1);
                let h1 = tape.gelu(h1);
                let gn = tape.param(s, g);
                let bn = tape.param(s, be);
                let h1 = tape.layer_norm(h1, gn, bn);
                let h2 = linear(&mut tape, s, h1, w2, b2);
                let sm = tape.softmax_rows(h2);
                let picked = tape.gather_rows(sm, vec![0, 2]);
                let sl = tape.slice_cols(picked, 1, 3);
                let tr = tape.transpose(sl);
                let pooled = tape.max_pool_rows(tr);
                let sc = tape.scale(pooled, 3.0);
                // Reduce to scalar via cross-entropy on a fake 1-row logits.
                let root = tape.cross_entropy(sc, vec![1], vec![1.0]);
                (tape, root)
            },
            1e-5,
        );
    }

    #[test]
    fn attention_style_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::default();
        let d = 4;
        let wq = store.add("wq", d, d, (0..16).map(|_| rng.gen_range(-0.5..0.5)).collect());
        let bq = store.add("bq", 1, d, vec![0.1; d]);
        let wk = store.add("wk", d, d, (0..16).map(|_| rng.gen_range(-0.5..0.5)).collect());
        let bk = store.add("bk", 1, d, vec![0.0; d]);
        let wv = store.add("wv", d, d, (0..16).map(|_| rng.gen_range(-0.5..0.5)).collect());
        let bv = store.add("bv", 1, d, vec![0.0; d]);
        let x = Tensor::from_vec(3, d, (0..12).map(|i| (i as f64 * 0.61).cos()).collect());

        fd_check(
            &mut store,
            |s| {
                let mut tape = Tape::new();
                let xn = tape.constant(x.clone());
                let q = linear(&mut tape, s, xn, wq, bq);
                let k = linear(&mut tape, s, xn, wk, bk);
                let v = linear(&mut tape, s, xn, wv, bv);
                let kt = tape.transpose(k);
                let scores = tape.matmul(q, kt);
                let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
                let mask = vec![false, true, false, false, false, true, false, false, false];
                let scores = tape.mask_fill(scores, mask, -1e9);
                let p = tape.softmax_rows(scores);
                let ctx = tape.matmul(p, v);
                let logits = tape.concat_rows(vec![ctx]);
                let root = tape.cross_entropy(logits, vec![2, 0, 1], vec![1.0, 0.0, 1.0]);
                (tape, root)
            },
            1e-5,
        );
    }

    #[test]
    fn edge_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (m, k, d) = (3, 4, 5);
        let mut store = ParamStore::default();
        let wq = store.add("wq", d, d, (0..25).map(|_| rng.gen_range(-0.5..0.5)).collect());
        let bq = store.add("bq", 1, d, vec![0.0; d]);
        let wr = store.add("wr", 2, d, (0..10).map(|_| rng.gen_range(-0.5..0.5)).collect());
        let br = store.add("br", 1, d, vec![0.0; d]);
        let x = Tensor::from_vec(m, d, (0..m * d).map(|i| (i as f64 * 0.21).sin()).collect());
        let rel_in =
            Tensor::from_vec(m * k, 2, (0..m * k * 2).map(|i| (i as f64 * 0.47).cos()).collect());

        fd_check(
            &mut store,
            |s| {
                let mut tape = Tape::new();
                let xn = tape.constant(x.clone());
                let rn = tape.constant(rel_in.clone());
                let q = linear(&mut tape, s, xn, wq, bq);
                let rel = linear(&mut tape, s, rn, wr, br);
                let e = tape.edge_scores(q, rel, k);
                let p = tape.softmax_rows(e);
                let mixed = tape.edge_mix(p, rel);
                let root = tape.cross_entropy(mixed, vec![0, 2, 4], vec![1.0, 1.0, 0.5]);
                (tape, root)
            },
            1e-5,
        );
    }

    #[test]
    fn uniform_cross_entropy_is_log_n() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(2, 1092));
        let root = tape.cross_entropy(logits, vec![5, 10], vec![1.0, 1.0]);
        let expected = (1092.0f64).ln();
        assert!((tape.value(root).data[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn permute_cols_round_trip() {
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::from_vec(1, 4, vec![1.0, 2.0, 3.0, 4.0]));
        let perm = vec![3, 2, 1, 0];
        let p = tape.permute_cols(t, perm.clone());
        let pp = tape.permute_cols(p, perm);
        assert_eq!(tape.value(pp).data, vec![1.0, 2.0, 3.0, 4.0]);
    }
}
