//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Nodes are appended in forward order; parents always precede children, so
//! the tape is topologically sorted by construction and cycles are
//! impossible (asserted in the op constructors). `backward` walks the tape
//! once in reverse creation order, which makes gradient accumulation
//! deterministic.
//!
//! A fresh graph is built per training step: parameters are copied in as
//! leaves, the forward pass appends activation nodes, and after `backward`
//! the optimizer reads the leaf gradients back out.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{layer_norm_rows, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(usize);

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    needs_grad: bool,
    op: Op<T>,
}

enum Op<T> {
    Leaf,
    Add(VarId, VarId),
    ElemMul(VarId, VarId),
    Scale(VarId, T),
    AddConst(VarId),
    MulConst(VarId, Tensor<T>),
    Matmul(VarId, VarId),
    /// `a[M×K] · b[N×K]ᵀ -> [M×N]`
    MatmulNT(VarId, VarId),
    Linear {
        x: VarId,
        w: VarId,
        b: VarId,
    },
    Relu(VarId),
    SoftmaxRows(VarId),
    LayerNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        means: Vec<T>,
        inv_stds: Vec<T>,
    },
    EmbedRows {
        table: VarId,
        ids: Vec<usize>,
    },
    SliceCols {
        x: VarId,
        start: usize,
        width: usize,
    },
    ConcatCols(Vec<VarId>),
    /// Expand per-row relative scores `S[L_q×(2r+1)]` into a full logit
    /// bias `B[L_q×L_k]` with `B[i][j] = S[i][clip_index(j-i)]`.
    RelScores {
        scores: VarId,
        len_k: usize,
        limit: usize,
    },
    /// Contract attention weights `A[L_q×L_k]` into per-distance mass
    /// `W[L_q×(2r+1)]` with `W[i][c] = Σ_{j: clip_index(j-i)=c} A[i][j]`.
    RelContext {
        attn: VarId,
        limit: usize,
    },
    CeSmoothed {
        logits: VarId,
        gold: Vec<usize>,
        epsilon: T,
        pad_id: usize,
        probs: Tensor<T>,
        n_active: usize,
    },
    /// `Σ w_i · x_i` over scalar nodes.
    WeightedSum(Vec<(VarId, T)>),
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that does not require a gradient (inputs, masks, tables).
    pub fn constant(&mut self, value: Tensor<T>) -> VarId {
        self.push(value, false, Op::Leaf)
    }

    /// Leaf parameter; `backward` accumulates a gradient for it.
    pub fn param(&mut self, value: Tensor<T>) -> VarId {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, id: VarId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated by the last `backward`, if any reached this node.
    pub fn grad(&self, id: VarId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor<T>, needs_grad: bool, op: Op<T>) -> VarId {
        // Parents must already be on the tape; this is what rules out cycles.
        debug_assert!(op_parents(&op).iter().all(|p| p.0 < self.nodes.len()));
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        VarId(self.nodes.len() - 1)
    }

    fn child(&mut self, value: Tensor<T>, op: Op<T>) -> VarId {
        let needs = op_parents(&op)
            .iter()
            .any(|p| self.nodes[p.0].needs_grad);
        self.push(value, needs, op)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.child(value, Op::Add(a, b)))
    }

    pub fn elem_mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.child(value, Op::ElemMul(a, b)))
    }

    pub fn scale(&mut self, x: VarId, s: T) -> VarId {
        let value = self.value(x).scale(s);
        self.child(value, Op::Scale(x, s))
    }

    pub fn add_const(&mut self, x: VarId, c: Tensor<T>) -> Result<VarId> {
        let value = self.value(x).add(&c)?;
        Ok(self.child(value, Op::AddConst(x)))
    }

    pub fn mul_const(&mut self, x: VarId, c: Tensor<T>) -> Result<VarId> {
        let value = self.value(x).mul(&c)?;
        Ok(self.child(value, Op::MulConst(x, c)))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.child(value, Op::Matmul(a, b)))
    }

    /// `a · bᵀ`; used for attention logits.
    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.child(value, Op::MatmulNT(a, b)))
    }

    /// `x·W + b` with the bias broadcast over rows.
    pub fn linear(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let mut value = self.value(x).matmul(self.value(w))?;
        let bias = self.value(b);
        let n = value.last_dim();
        if bias.len() != n {
            return Err(Error::shape(
                "linear",
                format!("bias length {} vs output dim {}", bias.len(), n),
            ));
        }
        for r in 0..value.len() / n {
            let row = value.row_mut(r);
            for (o, &bv) in row.iter_mut().zip(bias.data()) {
                *o = *o + bv;
            }
        }
        Ok(self.child(value, Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.child(value, Op::Relu(x))
    }

    pub fn softmax_rows(&mut self, x: VarId) -> VarId {
        let value = self.value(x).softmax_lastdim();
        self.child(value, Op::SoftmaxRows(x))
    }

    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: T) -> Result<VarId> {
        let (value, means, inv_stds) =
            layer_norm_rows(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.child(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                means,
                inv_stds,
            },
        ))
    }

    /// Gather rows of `table` by token id.
    pub fn embed_rows(&mut self, table: VarId, ids: &[usize]) -> Result<VarId> {
        let (rows, dim) = self.value(table).dims2()?;
        if let Some(&bad) = ids.iter().find(|&&id| id >= rows) {
            return Err(Error::shape(
                "embed_rows",
                format!("token id {bad} out of vocabulary {rows}"),
            ));
        }
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            data.extend_from_slice(self.value(table).row(id));
        }
        let value = Tensor::new(&[ids.len(), dim], data)?;
        Ok(self.child(
            value,
            Op::EmbedRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&mut self, x: VarId, start: usize, width: usize) -> Result<VarId> {
        let (rows, cols) = self.value(x).dims2()?;
        if start + width > cols {
            return Err(Error::shape(
                "slice_cols",
                format!("cols [{start}, {}) out of {cols}", start + width),
            ));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&src.row(r)[start..start + width]);
        }
        let value = Tensor::new(&[rows, width], data)?;
        Ok(self.child(value, Op::SliceCols { x, start, width }))
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no parts".to_string()));
        }
        let rows = self.value(parts[0]).dims2()?.0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row counts differ: {rows} vs {r}"),
                ));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(&[rows, total], data)?;
        Ok(self.child(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn rel_scores(&mut self, scores: VarId, len_k: usize, limit: usize) -> Result<VarId> {
        let (len_q, table) = self.value(scores).dims2()?;
        if table != 2 * limit + 1 {
            return Err(Error::shape(
                "rel_scores",
                format!("table width {table} vs 2*{limit}+1"),
            ));
        }
        let src = self.value(scores);
        let mut data = Vec::with_capacity(len_q * len_k);
        for i in 0..len_q {
            let row = src.row(i);
            for j in 0..len_k {
                data.push(row[clip_index(j as i64 - i as i64, limit)]);
            }
        }
        let value = Tensor::new(&[len_q, len_k], data)?;
        Ok(self.child(
            value,
            Op::RelScores {
                scores,
                len_k,
                limit,
            },
        ))
    }

    pub fn rel_context(&mut self, attn: VarId, limit: usize) -> Result<VarId> {
        let (len_q, _len_k) = self.value(attn).dims2()?;
        let width = 2 * limit + 1;
        let src = self.value(attn);
        let mut data = vec![T::zero(); len_q * width];
        for i in 0..len_q {
            let row = src.row(i);
            for (j, &a) in row.iter().enumerate() {
                let c = clip_index(j as i64 - i as i64, limit);
                data[i * width + c] = data[i * width + c] + a;
            }
        }
        let value = Tensor::new(&[len_q, width], data)?;
        Ok(self.child(value, Op::RelContext { attn, limit }))
    }

    /// Label-smoothed cross-entropy, averaged over positions whose gold id
    /// is not `pad_id`. The target distribution spreads `epsilon` over all
    /// `V` classes including the gold one:
    /// `q = epsilon/V + (1-epsilon)·onehot(gold)`.
    pub fn cross_entropy_smoothed(
        &mut self,
        logits: VarId,
        gold: &[usize],
        epsilon: T,
        pad_id: usize,
    ) -> Result<VarId> {
        let (rows, vocab) = self.value(logits).dims2()?;
        if gold.len() != rows {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} gold ids vs {} logit rows", gold.len(), rows),
            ));
        }
        if let Some(&bad) = gold.iter().find(|&&g| g >= vocab) {
            return Err(Error::shape(
                "cross_entropy",
                format!("gold id {bad} out of vocabulary {vocab}"),
            ));
        }
        let logp = self.value(logits).log_softmax_lastdim();
        let uniform = epsilon / T::from_usize(vocab);
        let mut total = T::zero();
        let mut n_active = 0usize;
        for (t, &g) in gold.iter().enumerate() {
            if g == pad_id {
                continue;
            }
            let row = logp.row(t);
            let mut row_sum = T::zero();
            for &lp in row {
                row_sum = row_sum + lp;
            }
            total = total - ((T::one() - epsilon) * row[g] + uniform * row_sum);
            n_active += 1;
        }
        let loss = if n_active == 0 {
            T::zero()
        } else {
            total / T::from_usize(n_active)
        };
        let probs = logp.map(|lp| lp.exp());
        Ok(self.child(
            Tensor::scalar(loss),
            Op::CeSmoothed {
                logits,
                gold: gold.to_vec(),
                epsilon,
                pad_id,
                probs,
                n_active,
            },
        ))
    }

    /// `Σ w_i·x_i` over scalar nodes; combines per-sequence losses into a
    /// batch loss.
    pub fn weighted_sum(&mut self, terms: &[(VarId, T)]) -> Result<VarId> {
        let mut total = T::zero();
        for &(v, w) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::shape(
                    "weighted_sum",
                    format!("expected scalar node, got shape {:?}", t.shape()),
                ));
            }
            total = total + t.item() * w;
        }
        Ok(self.child(Tensor::scalar(total), Op::WeightedSum(terms.to_vec())))
    }

    /// Reverse-mode pass from a scalar root. Gradients accumulate on every
    /// node that (transitively) requires them; leaves created with
    /// [`Graph::constant`] stay gradient-free.
    pub fn backward(&mut self, root: VarId) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {:?}", self.value(root).shape()),
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let seed = Tensor::full(self.value(root).shape(), T::one());
        self.nodes[root.0].grad = Some(seed);
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(out_grad) = self.nodes[idx].grad.take() else {
                continue;
            };
            self.propagate(idx, &out_grad)?;
            self.nodes[idx].grad = Some(out_grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, target: VarId, contribution: Tensor<T>) -> Result<()> {
        let node = &mut self.nodes[target.0];
        if !node.needs_grad {
            return Ok(());
        }
        match &mut node.grad {
            Some(g) => g.add_assign(&contribution)?,
            None => node.grad = Some(contribution),
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, g: &Tensor<T>) -> Result<()> {
        // `op` is moved out and restored so `self` can be borrowed freely.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, g.clone())?;
                self.accumulate(*b, g.clone())?;
            }
            Op::ElemMul(a, b) => {
                let da = g.mul(self.value(*b))?;
                let db = g.mul(self.value(*a))?;
                self.accumulate(*a, da)?;
                self.accumulate(*b, db)?;
            }
            Op::Scale(x, s) => {
                self.accumulate(*x, g.scale(*s))?;
            }
            Op::AddConst(x) => {
                self.accumulate(*x, g.clone())?;
            }
            Op::MulConst(x, c) => {
                self.accumulate(*x, g.mul(c)?)?;
            }
            Op::Matmul(a, b) => {
                let da = g.matmul_nt(self.value(*b))?;
                let db = self.value(*a).matmul_tn(g)?;
                self.accumulate(*a, da)?;
                self.accumulate(*b, db)?;
            }
            Op::MatmulNT(a, b) => {
                let da = g.matmul(self.value(*b))?;
                let db = g.matmul_tn(self.value(*a))?;
                self.accumulate(*a, da)?;
                self.accumulate(*b, db)?;
            }
            Op::Linear { x, w, b } => {
                let dx = g.matmul_nt(self.value(*w))?;
                let dw = self.value(*x).matmul_tn(g)?;
                let n = g.last_dim();
                let mut db = vec![T::zero(); n];
                for r in 0..g.len() / n {
                    for (acc, &gv) in db.iter_mut().zip(g.row(r)) {
                        *acc = *acc + gv;
                    }
                }
                self.accumulate(*x, dx)?;
                self.accumulate(*w, dw)?;
                self.accumulate(*b, Tensor::new(&[n], db)?)?;
            }
            Op::Relu(x) => {
                let dx = Tensor::new(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect(),
                )?;
                self.accumulate(*x, dx)?;
            }
            Op::SoftmaxRows(x) => {
                let y = &self.nodes[idx].value;
                let n = y.last_dim();
                let mut dx = vec![T::zero(); y.len()];
                for r in 0..y.len() / n {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let mut dot = T::zero();
                    for (yv, gv) in yr.iter().zip(gr) {
                        dot = dot + *yv * *gv;
                    }
                    let dr = &mut dx[r * n..(r + 1) * n];
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                let dx = Tensor::new(y.shape(), dx)?;
                self.accumulate(*x, dx)?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                means,
                inv_stds,
            } => {
                let xs = self.value(*x);
                let gs = self.value(*gamma);
                let n = xs.last_dim();
                let rows = xs.len() / n;
                let inv_n = T::one() / T::from_usize(n);
                let mut dx = vec![T::zero(); xs.len()];
                let mut dgamma = vec![T::zero(); n];
                let mut dbeta = vec![T::zero(); n];
                for r in 0..rows {
                    let xr = xs.row(r);
                    let gr = g.row(r);
                    let mean = means[r];
                    let inv_std = inv_stds[r];
                    // xhat_j = (x_j - mean) * inv_std
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..n {
                        let xhat = (xr[j] - mean) * inv_std;
                        let dxhat = gr[j] * gs.data()[j];
                        sum_dxhat = sum_dxhat + dxhat;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                        dgamma[j] = dgamma[j] + gr[j] * xhat;
                        dbeta[j] = dbeta[j] + gr[j];
                    }
                    let dr = &mut dx[r * n..(r + 1) * n];
                    for j in 0..n {
                        let xhat = (xr[j] - mean) * inv_std;
                        let dxhat = gr[j] * gs.data()[j];
                        dr[j] = inv_std
                            * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
                    }
                }
                let dx = Tensor::new(xs.shape(), dx)?;
                self.accumulate(*x, dx)?;
                self.accumulate(*gamma, Tensor::new(&[n], dgamma)?)?;
                self.accumulate(*beta, Tensor::new(&[n], dbeta)?)?;
            }
            Op::EmbedRows { table, ids } => {
                let (rows, dim) = self.value(*table).dims2()?;
                let mut dt = vec![T::zero(); rows * dim];
                for (r, &id) in ids.iter().enumerate() {
                    let gr = g.row(r);
                    let dst = &mut dt[id * dim..(id + 1) * dim];
                    for (d, &gv) in dst.iter_mut().zip(gr) {
                        *d = *d + gv;
                    }
                }
                self.accumulate(*table, Tensor::new(&[rows, dim], dt)?)?;
            }
            Op::SliceCols { x, start, width } => {
                let (rows, cols) = self.value(*x).dims2()?;
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    let gr = g.row(r);
                    dx[r * cols + start..r * cols + start + width].copy_from_slice(&gr[..*width]);
                }
                self.accumulate(*x, Tensor::new(&[rows, cols], dx)?)?;
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let (rows, width) = self.value(p).dims2()?;
                    let mut dp = Vec::with_capacity(rows * width);
                    for r in 0..rows {
                        dp.extend_from_slice(&g.row(r)[start..start + width]);
                    }
                    self.accumulate(p, Tensor::new(&[rows, width], dp)?)?;
                    start += width;
                }
            }
            Op::RelScores {
                scores,
                len_k,
                limit,
            } => {
                let (len_q, width) = self.value(*scores).dims2()?;
                let mut ds = vec![T::zero(); len_q * width];
                for i in 0..len_q {
                    let gr = g.row(i);
                    for j in 0..*len_k {
                        let c = clip_index(j as i64 - i as i64, *limit);
                        ds[i * width + c] = ds[i * width + c] + gr[j];
                    }
                }
                self.accumulate(*scores, Tensor::new(&[len_q, width], ds)?)?;
            }
            Op::RelContext { attn, limit } => {
                let (len_q, len_k) = self.value(*attn).dims2()?;
                let mut da = vec![T::zero(); len_q * len_k];
                for i in 0..len_q {
                    let gr = g.row(i);
                    for j in 0..len_k {
                        let c = clip_index(j as i64 - i as i64, *limit);
                        da[i * len_k + j] = gr[c];
                    }
                }
                self.accumulate(*attn, Tensor::new(&[len_q, len_k], da)?)?;
            }
            Op::CeSmoothed {
                logits,
                gold,
                epsilon,
                pad_id,
                probs,
                n_active,
            } => {
                if *n_active > 0 {
                    let (rows, vocab) = probs.dims2()?;
                    let scale = g.item() / T::from_usize(*n_active);
                    let uniform = *epsilon / T::from_usize(vocab);
                    let mut dl = vec![T::zero(); rows * vocab];
                    for (t, &gid) in gold.iter().enumerate() {
                        if gid == *pad_id {
                            continue;
                        }
                        let pr = probs.row(t);
                        let dr = &mut dl[t * vocab..(t + 1) * vocab];
                        for c in 0..vocab {
                            let q = if c == gid {
                                uniform + (T::one() - *epsilon)
                            } else {
                                uniform
                            };
                            dr[c] = (pr[c] - q) * scale;
                        }
                    }
                    self.accumulate(*logits, Tensor::new(&[rows, vocab], dl)?)?;
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    self.accumulate(v, Tensor::scalar(g.item() * w))?;
                }
            }
        }
        self.nodes[idx].op = op;
        Ok(())
    }
}

/// Clipped relative-distance index: `clamp(delta, -limit, limit) + limit`,
/// always in `[0, 2*limit]`.
pub fn clip_index(delta: i64, limit: usize) -> usize {
    let r = limit as i64;
    (delta.clamp(-r, r) + r) as usize
}

fn op_parents<T>(op: &Op<T>) -> Vec<VarId> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::ElemMul(a, b) | Op::Matmul(a, b) | Op::MatmulNT(a, b) => {
            vec![*a, *b]
        }
        Op::Scale(x, _)
        | Op::AddConst(x)
        | Op::MulConst(x, _)
        | Op::Relu(x)
        | Op::SoftmaxRows(x) => vec![*x],
        Op::Linear { x, w, b } => vec![*x, *w, *b],
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::EmbedRows { table, .. } => vec![*table],
        Op::SliceCols { x, .. } => vec![*x],
        Op::ConcatCols(parts) => parts.clone(),
        Op::RelScores { scores, .. } => vec![*scores],
        Op::RelContext { attn, .. } => vec![*attn],
        Op::CeSmoothed { logits, .. } => vec![*logits],
        Op::WeightedSum(terms) => terms.iter().map(|&(v, _)| v).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    /// Central-difference gradient of `f` w.r.t. one leaf, built fresh per
    /// evaluation so the graph carries no state across calls.
    fn numeric_grad(
        build: impl Fn(&mut Graph<f64>, VarId) -> VarId,
        x0: &Tensor<f64>,
        h: f64,
    ) -> Vec<f64> {
        let mut grads = Vec::with_capacity(x0.len());
        for i in 0..x0.len() {
            let mut eval = |delta: f64| {
                let mut xs = x0.clone();
                xs.data_mut()[i] += delta;
                let mut g = Graph::new();
                let x = g.param(xs);
                let y = build(&mut g, x);
                g.value(y).item()
            };
            grads.push((eval(h) - eval(-h)) / (2.0 * h));
        }
        grads
    }

    fn analytic_grad(
        build: impl Fn(&mut Graph<f64>, VarId) -> VarId,
        x0: &Tensor<f64>,
    ) -> Vec<f64> {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let y = build(&mut g, x);
        g.backward(y).unwrap();
        g.grad(x).unwrap().data().to_vec()
    }

    fn assert_grads_close(
        build: impl Fn(&mut Graph<f64>, VarId) -> VarId,
        x0: &Tensor<f64>,
        tol: f64,
    ) {
        let a = analytic_grad(&build, x0);
        let n = numeric_grad(&build, x0, 1e-5);
        for (i, (av, nv)) in a.iter().zip(&n).enumerate() {
            let denom = av.abs().max(nv.abs()).max(1e-8);
            assert!(
                ((av - nv) / denom).abs() < tol,
                "coord {i}: analytic {av} vs numeric {nv}"
            );
        }
    }

    #[test]
    fn square_gradient() {
        // d(x·x)/dx at x=3 is 6
        let mut g = Graph::new();
        let x = g.param(t(&[1, 1], &[3.0]));
        let y = g.matmul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn detached_constant_has_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 1], &[2.0]));
        let c = g.constant(t(&[1, 1], &[5.0]));
        let y = g.matmul(x, c).unwrap();
        g.backward(y).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[5.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn matmul_chain_matches_finite_differences() {
        let x0 = t(&[2, 3], &[0.4, -1.2, 0.7, 2.0, 0.1, -0.5]);
        let w = t(&[3, 2], &[0.3, -0.8, 1.1, 0.2, -0.4, 0.9]);
        let build = move |g: &mut Graph<f64>, x: VarId| {
            let wv = g.constant(w.clone());
            let y = g.matmul(x, wv).unwrap();
            let y = g.relu(y);
            let probe = g.constant(t(&[1, 2], &[0.7, -0.4])); // via matmul_nt: y[2x2]·probeᵀ
            let s = g.matmul_nt(y, probe).unwrap(); // [2x1]
            let row = g.constant(t(&[1, 2], &[1.0, 1.0]));
            g.matmul(row, s).unwrap()
        };
        assert_grads_close(build, &x0, 1e-6);
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let x0 = t(&[2, 4], &[0.3, -0.1, 2.0, 0.5, -1.5, 0.0, 0.25, 1.0]);
        let probe = t(&[4, 1], &[0.7, -0.3, 0.4, 1.2]);
        let build = move |g: &mut Graph<f64>, x: VarId| {
            let s = g.softmax_rows(x);
            let p = g.constant(probe.clone());
            let v = g.matmul(s, p).unwrap(); // [2x1]
            let row = g.constant(t(&[1, 2], &[1.0, -2.0]));
            g.matmul(row, v).unwrap()
        };
        assert_grads_close(build, &x0, 1e-6);
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let x0 = t(&[2, 3], &[0.5, -1.0, 2.0, 3.0, 0.0, -0.7]);
        let gamma = t(&[3], &[1.2, 0.8, -0.5]);
        let beta = t(&[3], &[0.1, -0.2, 0.3]);
        let probe = t(&[3, 1], &[0.9, -0.4, 1.1]);
        let build = move |g: &mut Graph<f64>, x: VarId| {
            let ga = g.constant(gamma.clone());
            let be = g.constant(beta.clone());
            let y = g.layer_norm(x, ga, be, 1e-5).unwrap();
            let p = g.constant(probe.clone());
            let v = g.matmul(y, p).unwrap();
            let row = g.constant(t(&[1, 2], &[1.0, 1.0]));
            g.matmul(row, v).unwrap()
        };
        assert_grads_close(build, &x0, 1e-5);
    }

    #[test]
    fn layer_norm_param_gradients_match_finite_differences() {
        let x = t(&[2, 3], &[0.5, -1.0, 2.0, 3.0, 0.0, -0.7]);
        let gamma0 = t(&[3], &[1.2, 0.8, -0.5]);
        let probe = t(&[3, 1], &[0.9, -0.4, 1.1]);
        let build = move |g: &mut Graph<f64>, ga: VarId| {
            let xv = g.constant(x.clone());
            let be = g.constant(t(&[3], &[0.1, -0.2, 0.3]));
            let y = g.layer_norm(xv, ga, be, 1e-5).unwrap();
            let p = g.constant(probe.clone());
            let v = g.matmul(y, p).unwrap();
            let row = g.constant(t(&[1, 2], &[1.0, 1.0]));
            g.matmul(row, v).unwrap()
        };
        assert_grads_close(build, &gamma0, 1e-6);
    }

    #[test]
    fn embed_slice_concat_gradients_match_finite_differences() {
        let table0 = t(&[4, 4], &(0..16).map(|i| (i as f64) * 0.3 - 2.0).collect::<Vec<_>>());
        let build = |g: &mut Graph<f64>, table: VarId| {
            let e = g.embed_rows(table, &[2, 0, 2]).unwrap(); // repeated id: grads accumulate
            let a = g.slice_cols(e, 0, 2).unwrap();
            let b = g.slice_cols(e, 2, 2).unwrap();
            let c = g.concat_cols(&[b, a]).unwrap();
            let p = g.constant(t(&[4, 1], &[0.5, -1.0, 0.25, 2.0]));
            let v = g.matmul(c, p).unwrap();
            let row = g.constant(t(&[1, 3], &[1.0, 1.0, 1.0]));
            g.matmul(row, v).unwrap()
        };
        assert_grads_close(build, &table0, 1e-6);
    }

    #[test]
    fn relative_ops_gradients_match_finite_differences() {
        // limit 2 -> 5 distance rows; queries of length 4 against keys of 4
        let s0 = t(&[4, 5], &(0..20).map(|i| ((i * 7 % 13) as f64) * 0.21 - 1.0).collect::<Vec<_>>());
        let build = |g: &mut Graph<f64>, s: VarId| {
            let b = g.rel_scores(s, 4, 2).unwrap(); // [4x4]
            let sm = g.softmax_rows(b);
            let w = g.rel_context(sm, 2).unwrap(); // [4x5]
            let p = g.constant(t(&[5, 1], &[0.3, -0.2, 0.8, 1.0, -0.6]));
            let v = g.matmul(w, p).unwrap();
            let row = g.constant(t(&[1, 4], &[1.0, 0.5, -1.0, 0.25]));
            g.matmul(row, v).unwrap()
        };
        assert_grads_close(build, &s0, 1e-6);
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let w0 = t(&[3, 2], &[0.3, -0.8, 1.1, 0.2, -0.4, 0.9]);
        let x = t(&[2, 3], &[0.4, -1.2, 0.7, 2.0, 0.1, -0.5]);
        let build = move |g: &mut Graph<f64>, w: VarId| {
            let xv = g.constant(x.clone());
            let b = g.constant(t(&[2], &[0.5, -0.25]));
            let y = g.linear(xv, w, b).unwrap();
            let p = g.constant(t(&[2, 1], &[1.0, 0.7]));
            let v = g.matmul(y, p).unwrap();
            let row = g.constant(t(&[1, 2], &[1.0, 1.0]));
            g.matmul(row, v).unwrap()
        };
        assert_grads_close(build, &w0, 1e-6);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits0 = t(&[3, 4], &[0.2, -1.0, 0.7, 0.1, 2.0, 0.3, -0.5, 0.0, 0.9, 0.9, 0.9, 0.9]);
        let build = |g: &mut Graph<f64>, logits: VarId| {
            g.cross_entropy_smoothed(logits, &[2, 0, 3], 0.1, 99).unwrap()
        };
        assert_grads_close(build, &logits0, 1e-6);
    }

    #[test]
    fn cross_entropy_masks_pad_positions() {
        let logits0 = t(&[2, 3], &[0.5, -0.5, 1.0, 2.0, 0.0, -1.0]);
        // position 1 is pad: no gradient may flow from it
        let build = |g: &mut Graph<f64>, logits: VarId| {
            g.cross_entropy_smoothed(logits, &[2, 0], 0.1, 0).unwrap()
        };
        let a = analytic_grad(build, &logits0);
        assert!(a[3..].iter().all(|&v| v == 0.0));
        assert_grads_close(build, &logits0, 1e-6);
    }

    #[test]
    fn cross_entropy_zero_epsilon_is_nll() {
        let logits = t(&[2, 3], &[0.5, -0.5, 1.0, 2.0, 0.0, -1.0]);
        let gold = [2usize, 0];
        let mut g = Graph::new();
        let l = g.constant(logits.clone());
        let loss = g.cross_entropy_smoothed(l, &gold, 0.0, 99).unwrap();
        let logp = logits.log_softmax_lastdim();
        let nll = -(logp.row(0)[2] + logp.row(1)[0]) / 2.0;
        assert!((g.value(loss).item() - nll).abs() < 1e-7);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_vocab() {
        let logits = Tensor::<f64>::full(&[5, 8], 0.37);
        let mut g = Graph::new();
        let l = g.constant(logits);
        let loss = g.cross_entropy_smoothed(l, &[1, 2, 3, 4, 5], 0.3, 99).unwrap();
        assert!((g.value(loss).item() - (8.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_hand_computed_smoothing() {
        // V=2, logits [ln 3, 0], gold 0, eps 0.1:
        // p = (0.75, 0.25), q = (0.95, 0.05)
        let logits = t(&[1, 2], &[(3.0f64).ln(), 0.0]);
        let mut g = Graph::new();
        let l = g.constant(logits);
        let loss = g.cross_entropy_smoothed(l, &[0], 0.1, 99).unwrap();
        let want = -(0.95 * 0.75f64.ln() + 0.05 * 0.25f64.ln());
        assert!((g.value(loss).item() - want).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_gold() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros(&[1, 3]));
        assert!(g.cross_entropy_smoothed(l, &[3], 0.1, 99).is_err());
    }

    #[test]
    fn weighted_sum_combines_scalars() {
        let mut g = Graph::new();
        let a = g.param(Tensor::scalar(2.0f64));
        let b = g.param(Tensor::scalar(-1.0f64));
        let s = g.weighted_sum(&[(a, 0.5), (b, 2.0)]).unwrap();
        assert_eq!(g.value(s).item(), -1.0);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().item(), 0.5);
        assert_eq!(g.grad(b).unwrap().item(), 2.0);
    }

    #[test]
    fn clip_index_examples() {
        assert_eq!(clip_index(0, 16), 16);
        assert_eq!(clip_index(20, 16), 32);
        assert_eq!(clip_index(-100, 16), 0);
    }
}
