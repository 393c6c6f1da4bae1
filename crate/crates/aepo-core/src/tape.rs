//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Nodes hold row-major `f64` matrices (scalars are 1x1). Operations append
//! nodes eagerly; `backward` walks the tape in reverse and accumulates
//! adjoints. The op set is exactly what the policy network and the training
//! objectives need: dense matmul, rms normalization, fused causal attention,
//! row-wise log-softmax / entropy, gathers, slices and a handful of
//! elementwise maps.
//!
//! All loops run in a fixed index order, so values and gradients are
//! bit-reproducible for identical inputs regardless of thread count upstream.

pub(crate) const RMS_EPS: f64 = 1e-8;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    MatMul(NodeId, NodeId),
    AddRowBroadcast(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Abs(NodeId),
    Clamp(NodeId, f64, f64),
    MinElem(NodeId, NodeId),
    /// Row-wise rms normalization with gain applied as `(1 + g)`.
    RmsNorm(NodeId, NodeId),
    /// Rows of a table selected by token id.
    EmbedLookup(NodeId, Vec<usize>),
    /// Single-head causal self-attention over (T,d) query/key/value blocks.
    CausalAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        scale: f64,
    },
    LogSoftmaxRows(NodeId),
    /// Shannon entropy of each row of a log-probability matrix, in nats.
    EntropyRows(NodeId),
    /// One element per row, chosen by a per-row column index.
    GatherPerRow(NodeId, Vec<usize>),
    SliceRows(NodeId, usize, usize),
    ConcatRows(Vec<NodeId>),
    MeanAll(NodeId),
    SumAll(NodeId),
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    /// Cached intermediates needed by backward (attention probabilities).
    aux: Vec<f64>,
}

/// Gradient of a scalar tape output with respect to every reachable node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `id`; zeros-free `None` means the node does not influence
    /// the differentiated output.
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }
}

/// Append-only computation record.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let n = &self.nodes[id.0];
        assert!(n.rows == 1 && n.cols == 1, "scalar_value on non-scalar node");
        n.value[0]
    }

    pub fn contains(&self, id: NodeId) -> bool {
        id.0 < self.nodes.len()
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>, aux: Vec<f64>) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            op,
            rows,
            cols,
            value,
            aux,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> NodeId {
        assert_eq!(value.len(), rows * cols, "leaf shape mismatch");
        self.push(Op::Leaf, rows, cols, value, Vec::new())
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf(1, 1, vec![v])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!((r, c), self.shape(b), "add shape mismatch");
        let v = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        self.push(Op::Add(a, b), r, c, v, Vec::new())
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!((r, c), self.shape(b), "sub shape mismatch");
        let v = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        self.push(Op::Sub(a, b), r, c, v, Vec::new())
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!((r, c), self.shape(b), "mul shape mismatch");
        let v = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        self.push(Op::Mul(a, b), r, c, v, Vec::new())
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().map(|x| x * s).collect();
        self.push(Op::Scale(a, s), r, c, v, Vec::new())
    }

    pub fn add_const(&mut self, a: NodeId, s: f64) -> NodeId {
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().map(|x| x + s).collect();
        self.push(Op::AddConst(a), r, c, v, Vec::new())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        assert_eq!(ka, kb, "matmul inner dim mismatch");
        let mut out = vec![0.0; m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..m {
                for l in 0..ka {
                    let x = av[i * ka + l];
                    if x == 0.0 {
                        continue;
                    }
                    let brow = &bv[l * n..(l + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += x * brow[j];
                    }
                }
            }
        }
        self.push(Op::MatMul(a, b), m, n, out, Vec::new())
    }

    /// `(m,n) + (1,n)` with the row vector added to every row.
    pub fn add_row_broadcast(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "broadcast row shape mismatch");
        let mut v = self.value(a).to_vec();
        {
            let rv = self.value(row);
            for i in 0..m {
                for j in 0..n {
                    v[i * n + j] += rv[j];
                }
            }
        }
        self.push(Op::AddRowBroadcast(a, row), m, n, v, Vec::new())
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(Op::Tanh(a), r, c, v, Vec::new())
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let v = self
            .value(a)
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        self.push(Op::Sigmoid(a), r, c, v, Vec::new())
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().map(|x| x.exp()).collect();
        self.push(Op::Exp(a), r, c, v, Vec::new())
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().map(|x| x.abs()).collect();
        self.push(Op::Abs(a), r, c, v, Vec::new())
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        assert!(lo <= hi, "clamp bounds inverted");
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().map(|x| x.clamp(lo, hi)).collect();
        self.push(Op::Clamp(a, lo, hi), r, c, v, Vec::new())
    }

    /// Elementwise minimum; ties take the gradient of the first operand.
    pub fn min_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!((r, c), self.shape(b), "min shape mismatch");
        let v = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x.min(*y))
            .collect();
        self.push(Op::MinElem(a, b), r, c, v, Vec::new())
    }

    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId) -> NodeId {
        let (m, n) = self.shape(x);
        assert_eq!(self.shape(gain), (1, n), "rms gain shape mismatch");
        let mut v = vec![0.0; m * n];
        {
            let xv = self.value(x);
            let gv = self.value(gain);
            for i in 0..m {
                let row = &xv[i * n..(i + 1) * n];
                let ms = row.iter().map(|a| a * a).sum::<f64>() / n as f64;
                let r = (ms + RMS_EPS).sqrt();
                for j in 0..n {
                    v[i * n + j] = row[j] / r * (1.0 + gv[j]);
                }
            }
        }
        self.push(Op::RmsNorm(x, gain), m, n, v, Vec::new())
    }

    pub fn embed_lookup(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let (vocab, d) = self.shape(table);
        let mut v = vec![0.0; ids.len() * d];
        {
            let tv = self.value(table);
            for (i, &id) in ids.iter().enumerate() {
                assert!(id < vocab, "embedding id {id} out of range {vocab}");
                v[i * d..(i + 1) * d].copy_from_slice(&tv[id * d..(id + 1) * d]);
            }
        }
        self.push(Op::EmbedLookup(table, ids.to_vec()), ids.len(), d, v, Vec::new())
    }

    pub fn causal_attention(&mut self, q: NodeId, k: NodeId, v: NodeId, scale: f64) -> NodeId {
        let (t, d) = self.shape(q);
        assert_eq!(self.shape(k), (t, d), "attention k shape mismatch");
        assert_eq!(self.shape(v), (t, d), "attention v shape mismatch");
        let mut out = vec![0.0; t * d];
        // Lower-triangular probabilities, row i occupying columns 0..=i.
        let mut probs = vec![0.0; t * t];
        {
            let qv = self.value(q);
            let kv = self.value(k);
            let vv = self.value(v);
            let mut scores = vec![0.0; t];
            for i in 0..t {
                let qrow = &qv[i * d..(i + 1) * d];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let krow = &kv[j * d..(j + 1) * d];
                    let mut s = 0.0;
                    for c in 0..d {
                        s += qrow[c] * krow[c];
                    }
                    let s = s * scale;
                    scores[j] = s;
                    if s > max {
                        max = s;
                    }
                }
                let mut denom = 0.0;
                for j in 0..=i {
                    let e = (scores[j] - max).exp();
                    probs[i * t + j] = e;
                    denom += e;
                }
                for j in 0..=i {
                    let p = probs[i * t + j] / denom;
                    probs[i * t + j] = p;
                    let vrow = &vv[j * d..(j + 1) * d];
                    let orow = &mut out[i * d..(i + 1) * d];
                    for c in 0..d {
                        orow[c] += p * vrow[c];
                    }
                }
            }
        }
        self.push(Op::CausalAttention { q, k, v, scale }, t, d, out, probs)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let mut v = vec![0.0; m * n];
        {
            let av = self.value(a);
            for i in 0..m {
                let row = &av[i * n..(i + 1) * n];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                for j in 0..n {
                    v[i * n + j] = row[j] - lse;
                }
            }
        }
        self.push(Op::LogSoftmaxRows(a), m, n, v, Vec::new())
    }

    /// Per-row entropy (nats) of a log-probability matrix; output is (m,1).
    pub fn entropy_rows(&mut self, logp: NodeId) -> NodeId {
        let (m, n) = self.shape(logp);
        let mut v = vec![0.0; m];
        {
            let lv = self.value(logp);
            for i in 0..m {
                let mut h = 0.0;
                for j in 0..n {
                    let lp = lv[i * n + j];
                    h -= lp.exp() * lp;
                }
                v[i] = h;
            }
        }
        self.push(Op::EntropyRows(logp), m, 1, v, Vec::new())
    }

    pub fn gather_per_row(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let (m, n) = self.shape(a);
        assert_eq!(idx.len(), m, "gather index count mismatch");
        let mut v = vec![0.0; m];
        {
            let av = self.value(a);
            for i in 0..m {
                assert!(idx[i] < n, "gather column out of range");
                v[i] = av[i * n + idx[i]];
            }
        }
        self.push(Op::GatherPerRow(a, idx.to_vec()), m, 1, v, Vec::new())
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (m, n) = self.shape(a);
        assert!(start + len <= m, "row slice out of range");
        let v = self.value(a)[start * n..(start + len) * n].to_vec();
        self.push(Op::SliceRows(a, start, len), len, n, v, Vec::new())
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of nothing");
        let (_, n) = self.shape(parts[0]);
        let mut rows = 0;
        let mut v = Vec::new();
        for &p in parts {
            let (r, c) = self.shape(p);
            assert_eq!(c, n, "concat column mismatch");
            rows += r;
            v.extend_from_slice(self.value(p));
        }
        self.push(Op::ConcatRows(parts.to_vec()), rows, n, v, Vec::new())
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push(Op::MeanAll(a), 1, 1, vec![m], Vec::new())
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).iter().sum::<f64>();
        self.push(Op::SumAll(a), 1, 1, vec![s], Vec::new())
    }

    /// Reverse pass from a scalar `loss` node. Nodes that do not influence the
    /// loss keep a `None` gradient.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        let n = &self.nodes[loss.0];
        assert!(
            n.rows == 1 && n.cols == 1,
            "backward requires a scalar loss node"
        );
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn grad_slot<'a>(
        grads: &'a mut [Option<Vec<f64>>],
        id: NodeId,
        len: usize,
    ) -> &'a mut Vec<f64> {
        grads[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn accumulate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let ga = Self::grad_slot(grads, *a, g.len());
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += y;
                }
                let gb = Self::grad_slot(grads, *b, g.len());
                for (x, y) in gb.iter_mut().zip(g) {
                    *x += y;
                }
            }
            Op::Sub(a, b) => {
                let ga = Self::grad_slot(grads, *a, g.len());
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += y;
                }
                let gb = Self::grad_slot(grads, *b, g.len());
                for (x, y) in gb.iter_mut().zip(g) {
                    *x -= y;
                }
            }
            Op::Mul(a, b) => {
                let bv = self.value(*b).to_vec();
                let av = self.value(*a).to_vec();
                let ga = Self::grad_slot(grads, *a, g.len());
                for j in 0..g.len() {
                    ga[j] += g[j] * bv[j];
                }
                let gb = Self::grad_slot(grads, *b, g.len());
                for j in 0..g.len() {
                    gb[j] += g[j] * av[j];
                }
            }
            Op::Scale(a, s) => {
                let ga = Self::grad_slot(grads, *a, g.len());
                for j in 0..g.len() {
                    ga[j] += g[j] * s;
                }
            }
            Op::AddConst(a) => {
                let ga = Self::grad_slot(grads, *a, g.len());
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += y;
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let (_, n) = self.shape(*b);
                let av = self.value(*a).to_vec();
                let bv = self.value(*b).to_vec();
                {
                    let ga = Self::grad_slot(grads, *a, m * k);
                    for i2 in 0..m {
                        for l in 0..k {
                            let mut s = 0.0;
                            let grow = &g[i2 * n..(i2 + 1) * n];
                            let brow = &bv[l * n..(l + 1) * n];
                            for j in 0..n {
                                s += grow[j] * brow[j];
                            }
                            ga[i2 * k + l] += s;
                        }
                    }
                }
                {
                    let gb = Self::grad_slot(grads, *b, k * n);
                    for i2 in 0..m {
                        for l in 0..k {
                            let x = av[i2 * k + l];
                            if x == 0.0 {
                                continue;
                            }
                            let grow = &g[i2 * n..(i2 + 1) * n];
                            let brow = &mut gb[l * n..(l + 1) * n];
                            for j in 0..n {
                                brow[j] += x * grow[j];
                            }
                        }
                    }
                }
            }
            Op::AddRowBroadcast(a, row) => {
                let (m, n) = (rows, cols);
                let ga = Self::grad_slot(grads, *a, m * n);
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += y;
                }
                let gr = Self::grad_slot(grads, *row, n);
                for i2 in 0..m {
                    for j in 0..n {
                        gr[j] += g[i2 * n + j];
                    }
                }
            }
            Op::Tanh(a) => {
                let yv = node.value.clone();
                let ga = Self::grad_slot(grads, *a, g.len());
                for j in 0..g.len() {
                    ga[j] += g[j] * (1.0 - yv[j] * yv[j]);
                }
            }
            Op::Sigmoid(a) => {
                let yv = node.value.clone();
                let ga = Self::grad_slot(grads, *a, g.len());
                for j in 0..g.len() {
                    ga[j] += g[j] * yv[j] * (1.0 - yv[j]);
                }
            }
            Op::Exp(a) => {
                let yv = node.value.clone();
                let ga = Self::grad_slot(grads, *a, g.len());
                for j in 0..g.len() {
                    ga[j] += g[j] * yv[j];
                }
            }
            Op::Abs(a) => {
                let xv = self.value(*a).to_vec();
                let ga = Self::grad_slot(grads, *a, g.len());
                for j in 0..g.len() {
                    let s = if xv[j] > 0.0 {
                        1.0
                    } else if xv[j] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    ga[j] += g[j] * s;
                }
            }
            Op::Clamp(a, lo, hi) => {
                let xv = self.value(*a).to_vec();
                let ga = Self::grad_slot(grads, *a, g.len());
                for j in 0..g.len() {
                    if xv[j] > *lo && xv[j] < *hi {
                        ga[j] += g[j];
                    }
                }
            }
            Op::MinElem(a, b) => {
                let av = self.value(*a).to_vec();
                let bv = self.value(*b).to_vec();
                {
                    let ga = Self::grad_slot(grads, *a, g.len());
                    for j in 0..g.len() {
                        if av[j] <= bv[j] {
                            ga[j] += g[j];
                        }
                    }
                }
                {
                    let gb = Self::grad_slot(grads, *b, g.len());
                    for j in 0..g.len() {
                        if av[j] > bv[j] {
                            gb[j] += g[j];
                        }
                    }
                }
            }
            Op::RmsNorm(x, gain) => {
                let (m, n) = (rows, cols);
                let xv = self.value(*x).to_vec();
                let gv = self.value(*gain).to_vec();
                let mut dx = vec![0.0; m * n];
                let mut dgain = vec![0.0; n];
                for i2 in 0..m {
                    let row = &xv[i2 * n..(i2 + 1) * n];
                    let ms = row.iter().map(|a| a * a).sum::<f64>() / n as f64;
                    let r = (ms + RMS_EPS).sqrt();
                    // du = dy * (1+g); dx = (du - u * (du . u)/n) / r
                    let mut dot = 0.0;
                    let mut du = vec![0.0; n];
                    for j in 0..n {
                        let u = row[j] / r;
                        let dy = g[i2 * n + j];
                        dgain[j] += dy * u;
                        du[j] = dy * (1.0 + gv[j]);
                        dot += du[j] * u;
                    }
                    for j in 0..n {
                        let u = row[j] / r;
                        dx[i2 * n + j] = (du[j] - u * dot / n as f64) / r;
                    }
                }
                {
                    let gx = Self::grad_slot(grads, *x, m * n);
                    for j in 0..m * n {
                        gx[j] += dx[j];
                    }
                }
                {
                    let gg = Self::grad_slot(grads, *gain, n);
                    for j in 0..n {
                        gg[j] += dgain[j];
                    }
                }
            }
            Op::EmbedLookup(table, ids) => {
                let (vr, d) = self.shape(*table);
                let gt = Self::grad_slot(grads, *table, vr * d);
                for (i2, &id) in ids.iter().enumerate() {
                    let grow = &g[i2 * d..(i2 + 1) * d];
                    let trow = &mut gt[id * d..(id + 1) * d];
                    for c in 0..d {
                        trow[c] += grow[c];
                    }
                }
            }
            Op::CausalAttention { q, k, v, scale } => {
                let (t, d) = (rows, cols);
                let qv = self.value(*q).to_vec();
                let kv = self.value(*k).to_vec();
                let vv = self.value(*v).to_vec();
                let probs = &node.aux;
                let mut dq = vec![0.0; t * d];
                let mut dk = vec![0.0; t * d];
                let mut dv = vec![0.0; t * d];
                let mut dp = vec![0.0; t];
                for i2 in 0..t {
                    let grow = &g[i2 * d..(i2 + 1) * d];
                    // dV and dP
                    let mut psum = 0.0;
                    for j in 0..=i2 {
                        let p = probs[i2 * t + j];
                        let vrow = &vv[j * d..(j + 1) * d];
                        let mut s = 0.0;
                        for c in 0..d {
                            dv[j * d + c] += p * grow[c];
                            s += grow[c] * vrow[c];
                        }
                        dp[j] = s;
                        psum += p * s;
                    }
                    // softmax jacobian, then scores -> q,k
                    for j in 0..=i2 {
                        let p = probs[i2 * t + j];
                        let ds = p * (dp[j] - psum) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let krow = &kv[j * d..(j + 1) * d];
                        let qrow = &qv[i2 * d..(i2 + 1) * d];
                        for c in 0..d {
                            dq[i2 * d + c] += ds * krow[c];
                            dk[j * d + c] += ds * qrow[c];
                        }
                    }
                }
                {
                    let gq = Self::grad_slot(grads, *q, t * d);
                    for j in 0..t * d {
                        gq[j] += dq[j];
                    }
                }
                {
                    let gk = Self::grad_slot(grads, *k, t * d);
                    for j in 0..t * d {
                        gk[j] += dk[j];
                    }
                }
                {
                    let gv2 = Self::grad_slot(grads, *v, t * d);
                    for j in 0..t * d {
                        gv2[j] += dv[j];
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                let (m, n) = (rows, cols);
                let lp = node.value.clone();
                let ga = Self::grad_slot(grads, *a, m * n);
                for i2 in 0..m {
                    let grow = &g[i2 * n..(i2 + 1) * n];
                    let gsum: f64 = grow.iter().sum();
                    for j in 0..n {
                        ga[i2 * n + j] += grow[j] - lp[i2 * n + j].exp() * gsum;
                    }
                }
            }
            Op::EntropyRows(logp) => {
                let (m, n) = self.shape(*logp);
                let lv = self.value(*logp).to_vec();
                let ga = Self::grad_slot(grads, *logp, m * n);
                for i2 in 0..m {
                    let gh = g[i2];
                    if gh == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        let lp = lv[i2 * n + j];
                        ga[i2 * n + j] += gh * (-lp.exp() * (1.0 + lp));
                    }
                }
            }
            Op::GatherPerRow(a, idx) => {
                let (m, n) = self.shape(*a);
                let ga = Self::grad_slot(grads, *a, m * n);
                for i2 in 0..m {
                    ga[i2 * n + idx[i2]] += g[i2];
                }
            }
            Op::SliceRows(a, start, len) => {
                let (_, n) = self.shape(*a);
                let (ar, _) = self.shape(*a);
                let ga = Self::grad_slot(grads, *a, ar * n);
                for j in 0..len * n {
                    ga[start * n + j] += g[j];
                }
            }
            Op::ConcatRows(parts) => {
                let n = cols;
                let mut offset = 0;
                for &p in parts {
                    let (pr, _) = self.shape(p);
                    let gp = Self::grad_slot(grads, p, pr * n);
                    for j in 0..pr * n {
                        gp[j] += g[offset * n + j];
                    }
                    offset += pr;
                }
            }
            Op::MeanAll(a) => {
                let (m, n) = self.shape(*a);
                let ga = Self::grad_slot(grads, *a, m * n);
                let s = g[0] / (m * n) as f64;
                for x in ga.iter_mut() {
                    *x += s;
                }
            }
            Op::SumAll(a) => {
                let (m, n) = self.shape(*a);
                let ga = Self::grad_slot(grads, *a, m * n);
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }
        }
    }
}
