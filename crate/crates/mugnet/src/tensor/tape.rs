//! Computation tape: records primitive tensor operations in topological
//! order and accumulates gradients by traversing the record in reverse.
//!
//! A tape is confined to one thread for one forward/backward pass. Leaves
//! marked `requires_grad` keep their accumulated gradient on the tape after
//! `backward`; calling `backward` again without zeroing doubles it.

use std::sync::Arc;

use super::{broadcast_shape, broadcast_strides, for_each_broadcast, Tensor};
use crate::error::{Error, Result};

const BN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Batch-norm running statistics, updated in train mode with momentum.
#[derive(Debug, Clone)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(dim: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[dim]),
            var: Tensor::ones(&[dim]),
            momentum: 0.1,
        }
    }
}

/// Compressed sparse neighbour lists; node i's neighbours are
/// `nbrs[offsets[i]..offsets[i+1]]`, ascending, never containing i.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    offsets: Vec<usize>,
    nbrs: Vec<usize>,
}

impl Adjacency {
    pub fn from_lists(lists: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut nbrs = Vec::new();
        offsets.push(0);
        for l in lists {
            debug_assert!(l.windows(2).all(|w| w[0] < w[1]));
            nbrs.extend_from_slice(l);
            offsets.push(nbrs.len());
        }
        Adjacency { offsets, nbrs }
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.nbrs[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnKind {
    Relu,
    Sigmoid,
    Exp,
    Ln,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RedKind {
    Sum,
    Mean,
    Max,
}

enum Op {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Binary {
        kind: BinKind,
        a: Var,
        b: Var,
    },
    Unary {
        kind: UnKind,
        a: Var,
    },
    Reduce {
        kind: RedKind,
        a: Var,
        axis: usize,
        /// Input flat index chosen per output element (max only).
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        /// Statistics used for normalization (batch or running).
        mean: Vec<f64>,
        var: Vec<f64>,
        mode: BnMode,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Reshape {
        a: Var,
    },
    SelectCols {
        a: Var,
        idx: Arc<Vec<usize>>,
    },
    MeanNeighbors {
        a: Var,
        adj: Arc<Adjacency>,
    },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    /// Persistent accumulated gradient (leaves only).
    grad: Option<Vec<f64>>,
    /// True when some requires_grad leaf feeds this node.
    needs: bool,
    op: Op,
}

/// Records a forward computation and differentiates it in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, needs: bool, op: Op) -> Var {
        self.nodes.push(Node {
            data,
            shape,
            requires_grad: false,
            grad: None,
            needs,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Copies a tensor onto the tape, honouring its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let v = self.push(
            t.data().to_vec(),
            t.shape().to_vec(),
            t.requires_grad,
            Op::Leaf,
        );
        self.nodes[v.0].requires_grad = t.requires_grad;
        v
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(data, shape)?;
        Ok(self.leaf(&t))
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(&Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// Accumulated gradient of a leaf; zeros when backward never reached it.
    pub fn grad(&self, v: Var) -> Vec<f64> {
        let n = self.node(v);
        n.grad.clone().unwrap_or_else(|| vec![0.0; n.data.len()])
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ----- primitive operations -------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul: lhs {sa:?} incompatible with rhs {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let (da, db) = (&self.node(a).data, &self.node(b).data);
            matmul_into(da, db, &mut out, m, k, n);
        }
        let needs = self.node(a).needs || self.node(b).needs;
        Ok(self.push(out, vec![m, n], needs, Op::Matmul { a, b, m, k, n }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let out_shape = broadcast_shape(self.shape(a), self.shape(b))?;
        let rank = out_shape.len();
        let sa = broadcast_strides(self.shape(a), rank);
        let sb = broadcast_strides(self.shape(b), rank);
        let numel: usize = out_shape.iter().product();
        let mut out = vec![0.0; numel];
        {
            let da = &self.node(a).data;
            let db = &self.node(b).data;
            for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| {
                let (x, y) = (da[ia], db[ib]);
                out[o] = match kind {
                    BinKind::Add => x + y,
                    BinKind::Sub => x - y,
                    BinKind::Mul => x * y,
                    BinKind::Div => x / y,
                };
            });
        }
        let needs = self.node(a).needs || self.node(b).needs;
        Ok(self.push(out, out_shape, needs, Op::Binary { kind, a, b }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnKind::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnKind::Sigmoid, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnKind::Exp, a)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(UnKind::Ln, a)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnKind::Neg, a)
    }

    fn unary(&mut self, kind: UnKind, a: Var) -> Var {
        let out: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .map(|&x| match kind {
                // f64::max would flush NaN to 0 and mask divergence.
                UnKind::Relu => {
                    if x > 0.0 || x.is_nan() {
                        x
                    } else {
                        0.0
                    }
                }
                UnKind::Sigmoid => 1.0 / (1.0 + (-x).exp()),
                UnKind::Exp => x.exp(),
                UnKind::Ln => x.ln(),
                UnKind::Neg => -x,
            })
            .collect();
        let shape = self.node(a).shape.clone();
        let needs = self.node(a).needs;
        self.push(out, shape, needs, Op::Unary { kind, a })
    }

    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(RedKind::Sum, a, axis)
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(RedKind::Mean, a, axis)
    }

    pub fn max(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(RedKind::Max, a, axis)
    }

    /// Sum of every element, as a `[1]`-shaped scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut v = a;
        while self.node(v).data.len() > 1 || self.node(v).shape.len() > 1 {
            let axis = self.node(v).shape.len() - 1;
            v = self.reduce(RedKind::Sum, v, axis).expect("axis in range");
        }
        v
    }

    fn reduce(&mut self, kind: RedKind, a: Var, axis: usize) -> Result<Var> {
        let shape = self.node(a).shape.clone();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "reduce axis {axis} out of range for shape {shape:?}"
            )));
        }
        if shape[axis] == 0 {
            return Err(Error::Domain("reduce over empty axis".into()));
        }
        let mut out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &d)| d)
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let outer: usize = shape[..axis].iter().product();
        let extent = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let out_numel = outer * inner;
        let mut out = vec![0.0; out_numel];
        let mut argmax = Vec::new();
        {
            let data = &self.node(a).data;
            match kind {
                RedKind::Sum | RedKind::Mean => {
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut acc = 0.0;
                            for e in 0..extent {
                                acc += data[(o * extent + e) * inner + i];
                            }
                            out[o * inner + i] = if kind == RedKind::Mean {
                                acc / extent as f64
                            } else {
                                acc
                            };
                        }
                    }
                }
                RedKind::Max => {
                    argmax = vec![0usize; out_numel];
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_idx = 0usize;
                            for e in 0..extent {
                                let idx = (o * extent + e) * inner + i;
                                // Strict > keeps the lowest-index argmax on ties.
                                if data[idx] > best {
                                    best = data[idx];
                                    best_idx = idx;
                                }
                            }
                            out[o * inner + i] = best;
                            argmax[o * inner + i] = best_idx;
                        }
                    }
                }
            }
        }
        let needs = self.node(a).needs;
        Ok(self.push(
            out,
            out_shape,
            needs,
            Op::Reduce {
                kind,
                a,
                axis,
                argmax,
            },
        ))
    }

    /// Batch normalization over the row axis of an `[N, F]` input.
    ///
    /// Train mode normalizes by batch statistics (biased variance) and
    /// updates `stats` in place with its momentum; eval mode normalizes by
    /// the running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: BnMode,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::Dimension(format!(
                "batch_norm expects [N, F] input, got {xs:?}"
            )));
        }
        let (n, f) = (xs[0], xs[1]);
        if self.shape(gamma) != [f] || self.shape(beta) != [f] || stats.mean.len() != f {
            return Err(Error::Dimension(format!(
                "batch_norm width mismatch: x {:?}, gamma {:?}, beta {:?}, stats {}",
                xs,
                self.shape(gamma),
                self.shape(beta),
                stats.mean.len()
            )));
        }
        let (mean, var) = match mode {
            BnMode::Train => {
                let data = &self.node(x).data;
                let mut mean = vec![0.0; f];
                let mut var = vec![0.0; f];
                for row in 0..n {
                    for col in 0..f {
                        mean[col] += data[row * f + col];
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                for row in 0..n {
                    for col in 0..f {
                        let d = data[row * f + col] - mean[col];
                        var[col] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                let mom = stats.momentum;
                for col in 0..f {
                    let rm = stats.mean.data_mut();
                    rm[col] = (1.0 - mom) * rm[col] + mom * mean[col];
                    let rv = stats.var.data_mut();
                    rv[col] = (1.0 - mom) * rv[col] + mom * var[col];
                }
                (mean, var)
            }
            BnMode::Eval => (stats.mean.data().to_vec(), stats.var.data().to_vec()),
        };
        let mut out = vec![0.0; n * f];
        {
            let xd = &self.node(x).data;
            let gd = &self.node(gamma).data;
            let bd = &self.node(beta).data;
            for row in 0..n {
                for col in 0..f {
                    let xhat = (xd[row * f + col] - mean[col]) / (var[col] + BN_EPS).sqrt();
                    out[row * f + col] = gd[col] * xhat + bd[col];
                }
            }
        }
        let needs = self.node(x).needs || self.node(gamma).needs || self.node(beta).needs;
        Ok(self.push(
            out,
            vec![n, f],
            needs,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                mode,
            },
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Dimension(format!(
                "concat axis {axis} out of range for shape {first:?}"
            )));
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::Dimension(format!(
                    "concat: shape {s:?} incompatible with {first:?} on axis {axis}"
                )));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let out_numel: usize = out_shape.iter().product();
        let mut out = vec![0.0; out_numel];
        let mut offset = 0usize;
        for &p in parts {
            let extent = self.shape(p)[axis];
            let data = &self.node(p).data;
            for o in 0..outer {
                let src = o * extent * inner;
                let dst = (o * axis_total + offset) * inner;
                out[dst..dst + extent * inner].copy_from_slice(&data[src..src + extent * inner]);
            }
            offset += extent;
        }
        let needs = parts.iter().any(|&p| self.node(p).needs);
        Ok(self.push(
            out,
            out_shape,
            needs,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.node(a).data.len() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "reshape {:?} -> {:?} changes element count",
                self.node(a).shape,
                shape
            )));
        }
        let data = self.node(a).data.clone();
        let needs = self.node(a).needs;
        Ok(self.push(data, shape.to_vec(), needs, Op::Reshape { a }))
    }

    /// Row-wise column pick: `out[i] = a[i, idx[i]]`.
    pub fn select_columns(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || idx.len() != s[0] {
            return Err(Error::Dimension(format!(
                "select_columns: shape {:?} with {} indices",
                s,
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&c| c >= s[1]) {
            return Err(Error::Validation(format!(
                "column index {} out of range for {} columns",
                bad, s[1]
            )));
        }
        let cols = s[1];
        let data = &self.node(a).data;
        let out: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(row, &c)| data[row * cols + c])
            .collect();
        let needs = self.node(a).needs;
        Ok(self.push(
            out,
            vec![s[0]],
            needs,
            Op::SelectCols {
                a,
                idx: Arc::new(idx.to_vec()),
            },
        ))
    }

    /// Per-node mean over graph neighbours: `out[i] = mean_{j in N(i)} a[j]`.
    /// Nodes without neighbours produce zero rows.
    pub fn mean_neighbors(&mut self, a: Var, adj: &Arc<Adjacency>) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] != adj.num_nodes() {
            return Err(Error::Dimension(format!(
                "mean_neighbors: features {:?} vs {} graph nodes",
                s,
                adj.num_nodes()
            )));
        }
        let (n, f) = (s[0], s[1]);
        let mut out = vec![0.0; n * f];
        {
            let data = &self.node(a).data;
            for i in 0..n {
                let nbrs = adj.neighbors(i);
                if nbrs.is_empty() {
                    continue;
                }
                let inv = 1.0 / nbrs.len() as f64;
                for &j in nbrs {
                    for c in 0..f {
                        out[i * f + c] += data[j * f + c];
                    }
                }
                for c in 0..f {
                    out[i * f + c] *= inv;
                }
            }
        }
        let needs = self.node(a).needs;
        Ok(self.push(
            out,
            vec![n, f],
            needs,
            Op::MeanNeighbors {
                a,
                adj: Arc::clone(adj),
            },
        ))
    }

    // ----- backward --------------------------------------------------------

    /// Reverse pass from a scalar loss. Adjoints are recomputed from scratch
    /// on every call and added into the persistent gradients of
    /// `requires_grad` leaves, so consecutive calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            if self.nodes[id].requires_grad {
                let grad = self.nodes[id]
                    .grad
                    .get_or_insert_with(|| vec![0.0; g.len()]);
                for (dst, src) in grad.iter_mut().zip(&g) {
                    *dst += src;
                }
            }
            if !self.nodes[id].needs {
                continue;
            }
            self.propagate(id, &g, &mut adj);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs || self.nodes[v.0].requires_grad
    }

    fn seed(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
        adj[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn propagate(&self, id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.wants(*a) {
                    // dA = dC * B^T
                    let bd = &self.nodes[b.0].data;
                    let da = Self::seed(adj, *a, m * k);
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += gij * bd[p * n + j];
                            }
                        }
                    }
                }
                if self.wants(*b) {
                    // dB = A^T * dC
                    let ad = &self.nodes[a.0].data;
                    let db = Self::seed(adj, *b, k * n);
                    for i in 0..m {
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::Binary { kind, a, b } => {
                let out_shape = &self.nodes[id].shape;
                let rank = out_shape.len();
                let sa = broadcast_strides(&self.nodes[a.0].shape, rank);
                let sb = broadcast_strides(&self.nodes[b.0].shape, rank);
                let (wa, wb) = (self.wants(*a), self.wants(*b));
                let a_len = self.nodes[a.0].data.len();
                let b_len = self.nodes[b.0].data.len();
                // Split borrows: adjoint buffers are per-node, inputs read-only.
                let mut da = if wa { vec![0.0; a_len] } else { Vec::new() };
                let mut db = if wb { vec![0.0; b_len] } else { Vec::new() };
                {
                    let ad = &self.nodes[a.0].data;
                    let bd = &self.nodes[b.0].data;
                    for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| match kind {
                        BinKind::Add => {
                            if wa {
                                da[ia] += g[o];
                            }
                            if wb {
                                db[ib] += g[o];
                            }
                        }
                        BinKind::Sub => {
                            if wa {
                                da[ia] += g[o];
                            }
                            if wb {
                                db[ib] -= g[o];
                            }
                        }
                        BinKind::Mul => {
                            if wa {
                                da[ia] += g[o] * bd[ib];
                            }
                            if wb {
                                db[ib] += g[o] * ad[ia];
                            }
                        }
                        BinKind::Div => {
                            if wa {
                                da[ia] += g[o] / bd[ib];
                            }
                            if wb {
                                db[ib] -= g[o] * ad[ia] / (bd[ib] * bd[ib]);
                            }
                        }
                    });
                }
                if wa {
                    accumulate(Self::seed(adj, *a, a_len), &da);
                }
                if wb {
                    accumulate(Self::seed(adj, *b, b_len), &db);
                }
            }
            Op::Unary { kind, a } => {
                if !self.wants(*a) {
                    return;
                }
                let len = self.nodes[a.0].data.len();
                let mut local = vec![0.0; len];
                {
                    let xd = &self.nodes[a.0].data;
                    let yd = &self.nodes[id].data;
                    for i in 0..len {
                        local[i] = match kind {
                            UnKind::Relu => {
                                if xd[i] > 0.0 {
                                    g[i]
                                } else {
                                    0.0
                                }
                            }
                            UnKind::Sigmoid => g[i] * yd[i] * (1.0 - yd[i]),
                            UnKind::Exp => g[i] * yd[i],
                            UnKind::Ln => g[i] / xd[i],
                            UnKind::Neg => -g[i],
                        };
                    }
                }
                accumulate(Self::seed(adj, *a, len), &local);
            }
            Op::Reduce {
                kind,
                a,
                axis,
                argmax,
            } => {
                if !self.wants(*a) {
                    return;
                }
                let in_shape = &self.nodes[a.0].shape;
                let len = self.nodes[a.0].data.len();
                let outer: usize = in_shape[..*axis].iter().product();
                let extent = in_shape[*axis];
                let inner: usize = in_shape[*axis + 1..].iter().product();
                let mut local = vec![0.0; len];
                match kind {
                    RedKind::Sum => {
                        for o in 0..outer {
                            for i in 0..inner {
                                let go = g[o * inner + i];
                                for e in 0..extent {
                                    local[(o * extent + e) * inner + i] += go;
                                }
                            }
                        }
                    }
                    RedKind::Mean => {
                        let inv = 1.0 / extent as f64;
                        for o in 0..outer {
                            for i in 0..inner {
                                let go = g[o * inner + i] * inv;
                                for e in 0..extent {
                                    local[(o * extent + e) * inner + i] += go;
                                }
                            }
                        }
                    }
                    RedKind::Max => {
                        for (out_idx, &src) in argmax.iter().enumerate() {
                            local[src] += g[out_idx];
                        }
                    }
                }
                accumulate(Self::seed(adj, *a, len), &local);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                mode,
            } => {
                let f = mean.len();
                let n = self.nodes[x.0].shape[0];
                let xd = &self.nodes[x.0].data;
                let gd = &self.nodes[gamma.0].data;
                // dbeta / dgamma are column sums.
                if self.wants(*beta) {
                    let mut dbeta = vec![0.0; f];
                    for row in 0..n {
                        for col in 0..f {
                            dbeta[col] += g[row * f + col];
                        }
                    }
                    accumulate(Self::seed(adj, *beta, f), &dbeta);
                }
                if self.wants(*gamma) {
                    let mut dgamma = vec![0.0; f];
                    for row in 0..n {
                        for col in 0..f {
                            let xhat = (xd[row * f + col] - mean[col]) / (var[col] + BN_EPS).sqrt();
                            dgamma[col] += g[row * f + col] * xhat;
                        }
                    }
                    accumulate(Self::seed(adj, *gamma, f), &dgamma);
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; n * f];
                    match mode {
                        BnMode::Eval => {
                            // Running stats are constants.
                            for row in 0..n {
                                for col in 0..f {
                                    dx[row * f + col] =
                                        g[row * f + col] * gd[col] / (var[col] + BN_EPS).sqrt();
                                }
                            }
                        }
                        BnMode::Train => {
                            // Batch statistics are functions of x.
                            let nf = n as f64;
                            for col in 0..f {
                                let istd = 1.0 / (var[col] + BN_EPS).sqrt();
                                let mut sum_dxhat = 0.0;
                                let mut sum_dxhat_xhat = 0.0;
                                for row in 0..n {
                                    let dxhat = g[row * f + col] * gd[col];
                                    let xhat = (xd[row * f + col] - mean[col]) * istd;
                                    sum_dxhat += dxhat;
                                    sum_dxhat_xhat += dxhat * xhat;
                                }
                                for row in 0..n {
                                    let dxhat = g[row * f + col] * gd[col];
                                    let xhat = (xd[row * f + col] - mean[col]) * istd;
                                    dx[row * f + col] = istd / nf
                                        * (nf * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                                }
                            }
                        }
                    }
                    accumulate(Self::seed(adj, *x, n * f), &dx);
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = &self.nodes[id].shape;
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let axis_total = out_shape[*axis];
                let mut offset = 0usize;
                for &p in parts {
                    let extent = self.nodes[p.0].shape[*axis];
                    if self.wants(p) {
                        let len = self.nodes[p.0].data.len();
                        let mut local = vec![0.0; len];
                        for o in 0..outer {
                            let dst = o * extent * inner;
                            let src = (o * axis_total + offset) * inner;
                            local[dst..dst + extent * inner]
                                .copy_from_slice(&g[src..src + extent * inner]);
                        }
                        accumulate(Self::seed(adj, p, len), &local);
                    }
                    offset += extent;
                }
            }
            Op::Reshape { a } => {
                if self.wants(*a) {
                    accumulate(Self::seed(adj, *a, g.len()), g);
                }
            }
            Op::SelectCols { a, idx } => {
                if !self.wants(*a) {
                    return;
                }
                let cols = self.nodes[a.0].shape[1];
                let len = self.nodes[a.0].data.len();
                let mut local = vec![0.0; len];
                for (row, &c) in idx.iter().enumerate() {
                    local[row * cols + c] += g[row];
                }
                accumulate(Self::seed(adj, *a, len), &local);
            }
            Op::MeanNeighbors { a, adj: graph } => {
                if !self.wants(*a) {
                    return;
                }
                let f = self.nodes[a.0].shape[1];
                let len = self.nodes[a.0].data.len();
                let mut local = vec![0.0; len];
                for i in 0..graph.num_nodes() {
                    let nbrs = graph.neighbors(i);
                    if nbrs.is_empty() {
                        continue;
                    }
                    let inv = 1.0 / nbrs.len() as f64;
                    for &j in nbrs {
                        for c in 0..f {
                            local[j * f + c] += g[i * f + c] * inv;
                        }
                    }
                }
                accumulate(Self::seed(adj, *a, len), &local);
            }
        }
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
}
