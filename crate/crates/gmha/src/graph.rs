//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records one forward pass as an ordered list of op nodes and
//! replays it in exact reverse insertion order on [`Graph::backward`]. Graphs
//! are rebuilt per forward call and never reused, which keeps traversal
//! deterministic. In debug builds every op output is scanned for NaN/Inf so
//! numeric blow-ups surface at the op that produced them (the causal-mask
//! `add_constant` is the one op allowed to emit `-inf`).

use crate::error::{Error, Result};
use crate::rope;
use crate::tensor::{self, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// a (m×k) · b (k×n)
    MatMul { a: NodeId, b: NodeId },
    /// a (m×k) · b (n×k)ᵀ
    MatMulNT { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    /// Row-wise Hadamard with a vector: out[t][j] = a[t][j] · v[j].
    MulRowVec { a: NodeId, v: NodeId },
    Scale { a: NodeId, factor: f64 },
    /// Element-wise addition of a constant tensor (mask / positional bias).
    AddConstant { a: NodeId },
    SoftmaxRows { a: NodeId },
    RmsNorm { x: NodeId, gamma: NodeId, eps: f64 },
    Silu { a: NodeId },
    /// Row gather: out[t] = table[tokens[t]].
    Embedding { table: NodeId, tokens: Vec<usize> },
    /// Pairwise rotation of each row by its position-dependent angles.
    RopeRows { a: NodeId, positions: Vec<usize>, base: f64 },
    /// Mean over rows of -log softmax(logits)[target]; scalar output.
    CrossEntropy { logits: NodeId, targets: Vec<usize> },
    SumAll { a: NodeId },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One forward pass worth of op records, in insertion order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    /// Register a leaf. Gradients are accumulated for it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value.with_requires_grad(requires_grad), Op::Leaf, requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient buffer of a node, if backward reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Debug-only numeric screen. `allow_neg_inf` covers mask application.
    fn screen(&self, data: &[f64], op: &str, allow_neg_inf: bool) -> Result<()> {
        if cfg!(debug_assertions) {
            for &v in data {
                if v.is_nan() || (v.is_infinite() && !(allow_neg_inf && v < 0.0)) {
                    return Err(Error::NonFinite(op.to_string()));
                }
            }
        }
        Ok(())
    }

    // ── Forward ops ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).matmul(self.value(b))?;
        self.screen(out.data(), "matmul", false)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::MatMul { a, b }, req))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        self.screen(out.data(), "matmul_nt", false)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::MatMulNT { a, b }, req))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).add(self.value(b))?;
        self.screen(out.data(), "add", false)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Add { a, b }, req))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Dim(format!(
                "mul shapes {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.screen(out.data(), "mul", false)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Mul { a, b }, req))
    }

    pub fn mul_rowvec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.value(a).dims2()?;
        if self.value(v).shape() != [cols] {
            return Err(Error::Dim(format!(
                "mul_rowvec matrix {:?} with vector {:?}",
                self.value(a).shape(),
                self.value(v).shape()
            )));
        }
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] = self.value(a).data()[r * cols + c] * self.value(v).data()[c];
            }
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        self.screen(out.data(), "mul_rowvec", false)?;
        let req = self.requires(a) || self.requires(v);
        Ok(self.push(out, Op::MulRowVec { a, v }, req))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let out = self.value(a).scale(factor);
        self.screen(out.data(), "scale", false)?;
        let req = self.requires(a);
        Ok(self.push(out, Op::Scale { a, factor }, req))
    }

    /// Add a constant tensor (no gradient into it). The constant may contain
    /// `-inf` for causal masking; that is the only sanctioned infinity.
    pub fn add_constant(&mut self, a: NodeId, constant: &Tensor) -> Result<NodeId> {
        let out = self.value(a).add(constant)?;
        self.screen(out.data(), "add_constant", true)?;
        let req = self.requires(a);
        Ok(self.push(out, Op::AddConstant { a }, req))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).softmax_rows()?;
        self.screen(out.data(), "softmax_rows", false)?;
        let req = self.requires(a);
        Ok(self.push(out, Op::SoftmaxRows { a }, req))
    }

    pub fn rmsnorm(&mut self, x: NodeId, gamma: NodeId, eps: f64) -> Result<NodeId> {
        let out = self.value(x).rmsnorm(self.value(gamma), eps)?;
        self.screen(out.data(), "rmsnorm", false)?;
        let req = self.requires(x) || self.requires(gamma);
        Ok(self.push(out, Op::RmsNorm { x, gamma, eps }, req))
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| tensor::silu(x)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.screen(out.data(), "silu", false)?;
        let req = self.requires(a);
        Ok(self.push(out, Op::Silu { a }, req))
    }

    /// SwiGLU feed-forward as a composition: `(silu(x·w1) ⊙ (x·w3)) · w2`.
    pub fn swiglu_ffn(
        &mut self,
        x: NodeId,
        w1: NodeId,
        w3: NodeId,
        w2: NodeId,
    ) -> Result<NodeId> {
        let a = self.matmul(x, w1)?;
        let gate = self.silu(a)?;
        let b = self.matmul(x, w3)?;
        let gated = self.mul(gate, b)?;
        self.matmul(gated, w2)
    }

    pub fn embedding(&mut self, table: NodeId, tokens: &[usize]) -> Result<NodeId> {
        let (vocab, h) = self.value(table).dims2()?;
        let mut data = Vec::with_capacity(tokens.len() * h);
        for &t in tokens {
            if t >= vocab {
                return Err(Error::TargetOutOfRange { index: t, vocab });
            }
            data.extend_from_slice(self.value(table).row(t));
        }
        let out = Tensor::new(vec![tokens.len(), h], data)?;
        let req = self.requires(table);
        Ok(self.push(out, Op::Embedding { table, tokens: tokens.to_vec() }, req))
    }

    /// Rotate each row `t` by the angles of `positions[t]`; see [`rope`].
    pub fn rope_rows(&mut self, a: NodeId, positions: &[usize], base: f64) -> Result<NodeId> {
        let out = rope::rope_apply(self.value(a), positions, base)?;
        self.screen(out.data(), "rope_rows", false)?;
        let req = self.requires(a);
        Ok(self.push(
            out,
            Op::RopeRows { a, positions: positions.to_vec(), base },
            req,
        ))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let loss = tensor::cross_entropy(self.value(logits), targets)?;
        let out = Tensor::scalar(loss);
        self.screen(out.data(), "cross_entropy", false)?;
        let req = self.requires(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy { logits, targets: targets.to_vec() },
            req,
        ))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().sum();
        let out = Tensor::scalar(s);
        self.screen(out.data(), "sum_all", false)?;
        let req = self.requires(a);
        Ok(self.push(out, Op::SumAll { a }, req))
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar node, visiting records in exact reverse
    /// insertion order. Gradients accumulate into every node on a path to a
    /// grad-requiring leaf.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Dim(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        self.nodes[root.0].value.grad_mut()[0] = 1.0;

        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gout) = self.nodes[idx].value.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            self.propagate(idx, &gout)?;
        }
        Ok(())
    }

    fn accum(&mut self, id: NodeId, contrib: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let g = self.nodes[id.0].value.grad_mut();
        for (gi, ci) in g.iter_mut().zip(contrib) {
            *gi += ci;
        }
    }

    fn propagate(&mut self, idx: usize, gout: &[f64]) -> Result<()> {
        // Ops read saved input values, compute raw contributions, then
        // accumulate; nothing here records new nodes.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = self.value(a).dims2()?;
                let (_, n) = self.value(b).dims2()?;
                if self.requires(a) {
                    let da = tensor::mm_nt(gout, m, n, self.value(b).data(), k);
                    self.accum(a, &da);
                }
                if self.requires(b) {
                    let db = tensor::mm_tn(self.value(a).data(), m, k, gout, n);
                    self.accum(b, &db);
                }
            }
            Op::MatMulNT { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = self.value(a).dims2()?;
                let (n, _) = self.value(b).dims2()?;
                if self.requires(a) {
                    let da = tensor::mm(gout, m, n, self.value(b).data(), k);
                    self.accum(a, &da);
                }
                if self.requires(b) {
                    let db = tensor::mm_tn(gout, m, n, self.value(a).data(), k);
                    self.accum(b, &db);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accum(a, gout);
                self.accum(b, gout);
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.requires(a) {
                    let da: Vec<f64> =
                        gout.iter().zip(self.value(b).data()).map(|(g, y)| g * y).collect();
                    self.accum(a, &da);
                }
                if self.requires(b) {
                    let db: Vec<f64> =
                        gout.iter().zip(self.value(a).data()).map(|(g, x)| g * x).collect();
                    self.accum(b, &db);
                }
            }
            Op::MulRowVec { a, v } => {
                let (a, v) = (*a, *v);
                let (rows, cols) = self.value(a).dims2()?;
                if self.requires(a) {
                    let vd = self.value(v).data().to_vec();
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            da[r * cols + c] = gout[r * cols + c] * vd[c];
                        }
                    }
                    self.accum(a, &da);
                }
                if self.requires(v) {
                    let ad = self.value(a).data();
                    let mut dv = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dv[c] += gout[r * cols + c] * ad[r * cols + c];
                        }
                    }
                    self.accum(v, &dv);
                }
            }
            Op::Scale { a, factor } => {
                let (a, factor) = (*a, *factor);
                let da: Vec<f64> = gout.iter().map(|g| g * factor).collect();
                self.accum(a, &da);
            }
            Op::AddConstant { a } => {
                let a = *a;
                self.accum(a, gout);
            }
            Op::SoftmaxRows { a } => {
                let a = *a;
                let (rows, cols) = self.nodes[idx].value.dims2()?;
                let y = self.nodes[idx].value.data();
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &gout[r * cols..(r + 1) * cols];
                    let inner = tensor::dot(yr, gr);
                    for c in 0..cols {
                        da[r * cols + c] = yr[c] * (gr[c] - inner);
                    }
                }
                self.accum(a, &da);
            }
            Op::RmsNorm { x, gamma, eps } => {
                let (x, gamma, eps) = (*x, *gamma, *eps);
                let h = *self.value(x).shape().last().unwrap();
                let rows = self.value(x).numel() / h;
                let xd = self.value(x).data().to_vec();
                let gd = self.value(gamma).data().to_vec();
                let mut dx = vec![0.0; xd.len()];
                let mut dgamma = vec![0.0; h];
                for r in 0..rows {
                    let xr = &xd[r * h..(r + 1) * h];
                    let gr = &gout[r * h..(r + 1) * h];
                    let inv = tensor::rms_inverse(xr, eps);
                    // s = sum_i g_out[i] * gamma[i] * x[i]
                    let mut s = 0.0;
                    for i in 0..h {
                        s += gr[i] * gd[i] * xr[i];
                        dgamma[i] += gr[i] * xr[i] * inv;
                    }
                    let inv3 = inv * inv * inv;
                    for i in 0..h {
                        dx[r * h + i] = gr[i] * gd[i] * inv - xr[i] * inv3 * s / h as f64;
                    }
                }
                if self.requires(x) {
                    self.accum(x, &dx);
                }
                if self.requires(gamma) {
                    self.accum(gamma, &dgamma);
                }
            }
            Op::Silu { a } => {
                let a = *a;
                let da: Vec<f64> = gout
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(g, &x)| g * tensor::silu_deriv(x))
                    .collect();
                self.accum(a, &da);
            }
            Op::Embedding { table, tokens } => {
                let (table, tokens) = (*table, tokens.clone());
                if self.requires(table) {
                    let (vocab, h) = self.value(table).dims2()?;
                    let mut dt = vec![0.0; vocab * h];
                    for (r, &t) in tokens.iter().enumerate() {
                        for c in 0..h {
                            dt[t * h + c] += gout[r * h + c];
                        }
                    }
                    self.accum(table, &dt);
                }
            }
            Op::RopeRows { a, positions, base } => {
                let (a, positions, base) = (*a, positions.clone(), *base);
                // Transpose of a rotation is the opposite rotation.
                let gt = Tensor::new(self.value(a).shape().to_vec(), gout.to_vec())?;
                let da = rope::rope_apply_signed(&gt, &positions, base, -1.0)?;
                self.accum(a, da.data());
            }
            Op::CrossEntropy { logits, targets } => {
                let (logits, targets) = (*logits, targets.clone());
                let (t, v) = self.value(logits).dims2()?;
                let g = gout[0];
                let mut dl = vec![0.0; t * v];
                for (r, &y) in targets.iter().enumerate() {
                    let row = self.value(logits).row(r);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut probs: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
                    let z: f64 = probs.iter().sum();
                    for p in &mut probs {
                        *p /= z;
                    }
                    for c in 0..v {
                        let onehot = if c == y { 1.0 } else { 0.0 };
                        dl[r * v + c] = g * (probs[c] - onehot) / t as f64;
                    }
                }
                self.accum(logits, &dl);
            }
            Op::SumAll { a } => {
                let a = *a;
                let da = vec![gout[0]; self.value(a).numel()];
                self.accum(a, &da);
            }
        }
        Ok(())
    }
}
