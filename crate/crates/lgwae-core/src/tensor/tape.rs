//! The recording tape and its primitive operations.

use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use super::{Tensor, TensorError};
use crate::math;

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value {
    tape_id: u64,
    idx: usize,
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { input: usize, axis: usize, start: usize },
    Transpose(usize),
    SoftmaxLastDim(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize },
    Gelu(usize),
    Sigmoid(usize),
    Sum(usize),
    Mean(usize),
    MeanAbs(usize),
    L2Norm(usize),
    Reciprocal(usize),
    BceWithLogits { logits: usize, targets: usize },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

/// Recorded compute graph. Nodes are appended in forward order, which makes
/// the vector itself a valid topological order; `backward` walks it once in
/// reverse.
#[derive(Debug, Default)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// `(rows, cols)` view of a rank 0..=2 shape.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [n, m] => (*n, *m),
        _ => unreachable!("rank > 2 is rejected at construction"),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Value) -> Result<usize, TensorError> {
        if v.tape_id != self.id || v.idx >= self.nodes.len() {
            return Err(TensorError::NotOnTape {
                index: v.idx,
                len: self.nodes.len(),
            });
        }
        Ok(v.idx)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Value {
        self.nodes.push(Node {
            op,
            shape,
            data,
            requires_grad,
        });
        Value {
            tape_id: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn requires(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    /// Record an input node. `requires_grad` marks it as a differentiation
    /// target for a later `backward` call.
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Result<Value, TensorError> {
        if t.shape().len() > 2 {
            return Err(TensorError::InvalidShape {
                op: "leaf",
                shape: t.shape().to_vec(),
                detail: "rank above 2",
            });
        }
        Ok(self.push(
            Op::Leaf,
            t.shape().to_vec(),
            t.data().to_vec(),
            requires_grad,
        ))
    }

    /// Input node that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Result<Value, TensorError> {
        self.leaf(t, false)
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        &self.nodes[v.idx].shape
    }

    pub fn data(&self, v: Value) -> &[f64] {
        &self.nodes[v.idx].data
    }

    pub fn to_tensor(&self, v: Value) -> Tensor {
        Tensor::new(self.nodes[v.idx].shape.clone(), self.nodes[v.idx].data.clone())
            .expect("node shape/data are consistent")
    }

    /// Gradient of the last `backward` target with respect to node `v`.
    pub fn grad(&self, v: Value) -> Option<&[f64]> {
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }

    // ── primitive forwards ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value, TensorError> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (asym, bsym) = (self.nodes[ai].shape.clone(), self.nodes[bi].shape.clone());
        let conforms = matches!((asym.as_slice(), bsym.as_slice()), ([_, k], [k2, _]) if k == k2);
        if !conforms {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: asym,
                rhs: bsym,
            });
        }
        let (n, k, m) = (asym[0], asym[1], bsym[1]);
        let mut out = vec![0.0; n * m];
        {
            let ad = &self.nodes[ai].data;
            let bd = &self.nodes[bi].data;
            for i in 0..n {
                let arow = &ad[i * k..(i + 1) * k];
                let orow = &mut out[i * m..(i + 1) * m];
                for (p, &av) in arow.iter().enumerate() {
                    if av != 0.0 {
                        let brow = &bd[p * m..(p + 1) * m];
                        for (o, &bv) in orow.iter_mut().zip(brow) {
                            *o += av * bv;
                        }
                    }
                }
            }
        }
        let rg = self.requires(ai) || self.requires(bi);
        Ok(self.push(Op::MatMul(ai, bi), vec![n, m], out, rg))
    }

    /// Elementwise add. The right operand may be a single row (`[m]` or
    /// `[1, m]`) broadcast over the rows of the left operand.
    pub fn add(&mut self, a: Value, b: Value) -> Result<Value, TensorError> {
        self.binary_rowwise("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value, TensorError> {
        self.binary_rowwise("sub", a, b, |x, y| x - y, Op::Sub)
    }

    fn binary_rowwise(
        &mut self,
        name: &'static str,
        a: Value,
        b: Value,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(usize, usize) -> Op,
    ) -> Result<Value, TensorError> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let ashape = self.nodes[ai].shape.clone();
        let (ar, ac) = rows_cols(&ashape);
        let (br, bc) = rows_cols(&self.nodes[bi].shape);
        let broadcast = ar > 1 && br == 1 && bc == ac;
        if !(broadcast || (ar, ac) == (br, bc)) {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: ashape,
                rhs: self.nodes[bi].shape.clone(),
            });
        }
        let ad = &self.nodes[ai].data;
        let bd = &self.nodes[bi].data;
        let mut out = Vec::with_capacity(ad.len());
        for r in 0..ar {
            for c in 0..ac {
                let bv = if broadcast { bd[c] } else { bd[r * bc + c] };
                out.push(f(ad[r * ac + c], bv));
            }
        }
        let rg = self.requires(ai) || self.requires(bi);
        Ok(self.push(make(ai, bi), ashape, out, rg))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value, TensorError> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        if self.nodes[ai].shape != self.nodes[bi].shape {
            return Err(TensorError::ShapeMismatch {
                op: "mul_elementwise",
                lhs: self.nodes[ai].shape.clone(),
                rhs: self.nodes[bi].shape.clone(),
            });
        }
        let out: Vec<f64> = self.nodes[ai]
            .data
            .iter()
            .zip(&self.nodes[bi].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[ai].shape.clone();
        let rg = self.requires(ai) || self.requires(bi);
        Ok(self.push(Op::Mul(ai, bi), shape, out, rg))
    }

    pub fn scale(&mut self, a: Value, c: f64) -> Result<Value, TensorError> {
        let ai = self.check(a)?;
        let out: Vec<f64> = self.nodes[ai].data.iter().map(|x| x * c).collect();
        let shape = self.nodes[ai].shape.clone();
        let rg = self.requires(ai);
        Ok(self.push(Op::Scale(ai, c), shape, out, rg))
    }

    pub fn add_scalar(&mut self, a: Value, c: f64) -> Result<Value, TensorError> {
        let ai = self.check(a)?;
        let out: Vec<f64> = self.nodes[ai].data.iter().map(|x| x + c).collect();
        let shape = self.nodes[ai].shape.clone();
        let rg = self.requires(ai);
        Ok(self.push(Op::AddScalar(ai, c), shape, out, rg))
    }

    /// Concatenate rank-2 tensors along `axis` (0 = stack rows, 1 = widen rows).
    pub fn concat(&mut self, parts: &[Value], axis: usize) -> Result<Value, TensorError> {
        if parts.is_empty() || axis > 1 {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: vec![parts.len(), axis],
                detail: "needs at least one part and axis 0 or 1",
            });
        }
        let mut idxs = Vec::with_capacity(parts.len());
        for p in parts {
            let i = self.check(*p)?;
            if self.nodes[i].shape.len() != 2 {
                return Err(TensorError::InvalidShape {
                    op: "concat",
                    shape: self.nodes[i].shape.clone(),
                    detail: "rank 2 required",
                });
            }
            idxs.push(i);
        }
        let first = self.nodes[idxs[0]].shape.clone();
        let fixed = first[1 - axis];
        let mut along = 0;
        for &i in &idxs {
            let s = &self.nodes[i].shape;
            if s[1 - axis] != fixed {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.clone(),
                });
            }
            along += s[axis];
        }
        let (rows, cols) = if axis == 0 { (along, fixed) } else { (fixed, along) };
        let mut out = vec![0.0; rows * cols];
        if axis == 0 {
            let mut at = 0;
            for &i in &idxs {
                let d = &self.nodes[i].data;
                out[at..at + d.len()].copy_from_slice(d);
                at += d.len();
            }
        } else {
            let mut col_at = 0;
            for &i in &idxs {
                let w = self.nodes[i].shape[1];
                let d = &self.nodes[i].data;
                for r in 0..rows {
                    out[r * cols + col_at..r * cols + col_at + w]
                        .copy_from_slice(&d[r * w..(r + 1) * w]);
                }
                col_at += w;
            }
        }
        let rg = idxs.iter().any(|&i| self.requires(i));
        Ok(self.push(Op::Concat { inputs: idxs, axis }, vec![rows, cols], out, rg))
    }

    /// Contiguous range of rows (`axis` 0) or columns (`axis` 1) of a rank-2 tensor.
    pub fn slice(
        &mut self,
        a: Value,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Value, TensorError> {
        let ai = self.check(a)?;
        let shape = self.nodes[ai].shape.clone();
        if shape.len() != 2 || axis > 1 {
            return Err(TensorError::InvalidShape {
                op: "slice",
                shape,
                detail: "rank 2 and axis 0 or 1 required",
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::InvalidShape {
                op: "slice",
                shape,
                detail: "range out of bounds",
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let (orows, ocols) = if axis == 0 { (len, cols) } else { (rows, len) };
        let mut out = Vec::with_capacity(orows * ocols);
        let d = &self.nodes[ai].data;
        if axis == 0 {
            out.extend_from_slice(&d[start * cols..(start + len) * cols]);
        } else {
            for r in 0..rows {
                out.extend_from_slice(&d[r * cols + start..r * cols + start + len]);
            }
        }
        let rg = self.requires(ai);
        Ok(self.push(
            Op::Slice {
                input: ai,
                axis,
                start,
            },
            vec![orows, ocols],
            out,
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Value) -> Result<Value, TensorError> {
        let ai = self.check(a)?;
        let shape = self.nodes[ai].shape.clone();
        let &[n, m] = shape.as_slice() else {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape,
                detail: "rank 2 required",
            });
        };
        let d = &self.nodes[ai].data;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = d[i * m + j];
            }
        }
        let rg = self.requires(ai);
        Ok(self.push(Op::Transpose(ai), vec![m, n], out, rg))
    }

    /// Row-wise softmax over the last dimension (max-shifted for stability).
    pub fn softmax_lastdim(&mut self, a: Value) -> Result<Value, TensorError> {
        let ai = self.check(a)?;
        let shape = self.nodes[ai].shape.clone();
        let (rows, cols) = rows_cols(&shape);
        if cols == 0 {
            return Err(TensorError::InvalidShape {
                op: "softmax_lastdim",
                shape,
                detail: "empty rows",
            });
        }
        let d = &self.nodes[ai].data;
        let mut out = vec![0.0; d.len()];
        for r in 0..rows {
            let row = &d[r * cols..(r + 1) * cols];
            let mut mx = row[0];
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let orow = &mut out[r * cols..(r + 1) * cols];
            let mut total = 0.0;
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = math::exp(v - mx);
                total += *o;
            }
            for o in orow.iter_mut() {
                *o /= total;
            }
        }
        let rg = self.requires(ai);
        Ok(self.push(Op::SoftmaxLastDim(ai), shape, out, rg))
    }

    /// Layer normalization over the last dimension with per-feature affine
    /// parameters (`gamma`, `beta` of shape `[d]`).
    pub fn layer_norm(
        &mut self,
        x: Value,
        gamma: Value,
        beta: Value,
    ) -> Result<Value, TensorError> {
        let (xi, gi, bi) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let shape = self.nodes[xi].shape.clone();
        let (rows, cols) = rows_cols(&shape);
        let gd_shape = rows_cols(&self.nodes[gi].shape);
        let bd_shape = rows_cols(&self.nodes[bi].shape);
        if gd_shape != (1, cols) || bd_shape != (1, cols) {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.nodes[gi].shape.clone(),
            });
        }
        let xd = &self.nodes[xi].data;
        let gd = &self.nodes[gi].data;
        let bd = &self.nodes[bi].data;
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / math::sqrt(var + LN_EPS);
            let orow = &mut out[r * cols..(r + 1) * cols];
            for c in 0..cols {
                orow[c] = (row[c] - mean) * inv * gd[c] + bd[c];
            }
        }
        let rg = self.requires(xi) || self.requires(gi) || self.requires(bi);
        Ok(self.push(
            Op::LayerNorm {
                x: xi,
                gamma: gi,
                beta: bi,
            },
            shape,
            out,
            rg,
        ))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Value) -> Result<Value, TensorError> {
        let ai = self.check(a)?;
        let out: Vec<f64> = self.nodes[ai]
            .data
            .iter()
            .map(|&x| 0.5 * x * (1.0 + math::erf(x / core::f64::consts::SQRT_2)))
            .collect();
        let shape = self.nodes[ai].shape.clone();
        let rg = self.requires(ai);
        Ok(self.push(Op::Gelu(ai), shape, out, rg))
    }

    pub fn sigmoid(&mut self, a: Value) -> Result<Value, TensorError> {
        let ai = self.check(a)?;
        let out: Vec<f64> = self.nodes[ai].data.iter().map(|&x| math::sigmoid(x)).collect();
        let shape = self.nodes[ai].shape.clone();
        let rg = self.requires(ai);
        Ok(self.push(Op::Sigmoid(ai), shape, out, rg))
    }

    pub fn sum(&mut self, a: Value) -> Result<Value, TensorError> {
        let ai = self.check(a)?;
        let total: f64 = self.nodes[ai].data.iter().sum();
        let rg = self.requires(ai);
        Ok(self.push(Op::Sum(ai), Vec::new(), vec![total], rg))
    }

    pub fn mean(&mut self, a: Value) -> Result<Value, TensorError> {
        let ai = self.check(a)?;
        let n = self.nodes[ai].data.len();
        let total: f64 = self.nodes[ai].data.iter().sum();
        let rg = self.requires(ai);
        Ok(self.push(Op::Mean(ai), Vec::new(), vec![total / n as f64], rg))
    }

    /// Mean absolute value over all elements (the L1 reduction used by the
    /// reconstruction losses).
    pub fn l1(&mut self, a: Value) -> Result<Value, TensorError> {
        let ai = self.check(a)?;
        let n = self.nodes[ai].data.len();
        let total: f64 = self.nodes[ai].data.iter().map(|&x| math::abs(x)).sum();
        let rg = self.requires(ai);
        Ok(self.push(Op::MeanAbs(ai), Vec::new(), vec![total / n as f64], rg))
    }

    /// Euclidean norm over all elements.
    pub fn l2_norm(&mut self, a: Value) -> Result<Value, TensorError> {
        let ai = self.check(a)?;
        let total: f64 = self.nodes[ai].data.iter().map(|&x| x * x).sum();
        let rg = self.requires(ai);
        Ok(self.push(Op::L2Norm(ai), Vec::new(), vec![math::sqrt(total)], rg))
    }

    pub fn reciprocal(&mut self, a: Value) -> Result<Value, TensorError> {
        let ai = self.check(a)?;
        let out: Vec<f64> = self.nodes[ai].data.iter().map(|&x| 1.0 / x).collect();
        let shape = self.nodes[ai].shape.clone();
        let rg = self.requires(ai);
        Ok(self.push(Op::Reciprocal(ai), shape, out, rg))
    }

    /// Mean binary cross entropy computed from logits. Stable for saturated
    /// probabilities; targets are usually constants in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Value, targets: Value) -> Result<Value, TensorError> {
        let (li, ti) = (self.check(logits)?, self.check(targets)?);
        if self.nodes[li].shape != self.nodes[ti].shape {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: self.nodes[li].shape.clone(),
                rhs: self.nodes[ti].shape.clone(),
            });
        }
        let n = self.nodes[li].data.len();
        let mut total = 0.0;
        for (&x, &t) in self.nodes[li].data.iter().zip(&self.nodes[ti].data) {
            total += math::softplus(x) - x * t;
        }
        let rg = self.requires(li) || self.requires(ti);
        Ok(self.push(
            Op::BceWithLogits {
                logits: li,
                targets: ti,
            },
            Vec::new(),
            vec![total / n as f64],
            rg,
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss; every leaf recorded with
    /// `requires_grad` receives `d(loss)/d(leaf)` retrievable via [`Tape::grad`].
    pub fn backward(&mut self, loss: Value) -> Result<(), TensorError> {
        let lid = self.check(loss)?;
        if self.nodes[lid].data.len() != 1 {
            return Err(TensorError::LossNotScalar {
                shape: self.nodes[lid].shape.clone(),
            });
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[lid] = Some(vec![1.0]);

        for id in (0..=lid).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[id].take() else {
                continue;
            };
            self.propagate(id, &gout);
            self.grads[id] = Some(gout);
        }
        Ok(())
    }

    fn ensure_grad(&mut self, idx: usize) -> &mut Vec<f64> {
        if self.grads[idx].is_none() {
            self.grads[idx] = Some(vec![0.0; self.nodes[idx].data.len()]);
        }
        self.grads[idx].as_mut().unwrap()
    }

    fn propagate(&mut self, id: usize, gout: &[f64]) {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(ai, bi) => {
                let (n, k) = (self.nodes[ai].shape[0], self.nodes[ai].shape[1]);
                let m = self.nodes[bi].shape[1];
                if self.requires(ai) {
                    let bd = self.nodes[bi].data.clone();
                    let ga = self.ensure_grad(ai);
                    for i in 0..n {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..m {
                                acc += gout[i * m + j] * bd[p * m + j];
                            }
                            ga[i * k + p] += acc;
                        }
                    }
                }
                if self.requires(bi) {
                    let ad = self.nodes[ai].data.clone();
                    let gb = self.ensure_grad(bi);
                    for p in 0..k {
                        for i in 0..n {
                            let av = ad[i * k + p];
                            if av != 0.0 {
                                for j in 0..m {
                                    gb[p * m + j] += av * gout[i * m + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::Add(ai, bi) | Op::Sub(ai, bi) => {
                let negate = matches!(self.nodes[id].op, Op::Sub(..));
                let (ar, ac) = rows_cols(&self.nodes[ai].shape);
                let (br, _) = rows_cols(&self.nodes[bi].shape);
                let broadcast = ar > 1 && br == 1;
                if self.requires(ai) {
                    let ga = self.ensure_grad(ai);
                    for (g, &v) in ga.iter_mut().zip(gout) {
                        *g += v;
                    }
                }
                if self.requires(bi) {
                    let s = if negate { -1.0 } else { 1.0 };
                    let gb = self.ensure_grad(bi);
                    if broadcast {
                        for r in 0..ar {
                            for c in 0..ac {
                                gb[c] += s * gout[r * ac + c];
                            }
                        }
                    } else {
                        for (g, &v) in gb.iter_mut().zip(gout) {
                            *g += s * v;
                        }
                    }
                }
            }
            Op::Mul(ai, bi) => {
                if self.requires(ai) {
                    let bd = self.nodes[bi].data.clone();
                    let ga = self.ensure_grad(ai);
                    for i in 0..bd.len() {
                        ga[i] += gout[i] * bd[i];
                    }
                }
                if self.requires(bi) {
                    let ad = self.nodes[ai].data.clone();
                    let gb = self.ensure_grad(bi);
                    for i in 0..ad.len() {
                        gb[i] += gout[i] * ad[i];
                    }
                }
            }
            Op::Scale(ai, c) => {
                if self.requires(ai) {
                    let ga = self.ensure_grad(ai);
                    for (g, &v) in ga.iter_mut().zip(gout) {
                        *g += c * v;
                    }
                }
            }
            Op::AddScalar(ai, _) => {
                if self.requires(ai) {
                    let ga = self.ensure_grad(ai);
                    for (g, &v) in ga.iter_mut().zip(gout) {
                        *g += v;
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let cols = self.nodes[id].shape[1];
                if axis == 0 {
                    let mut at = 0;
                    for &i in &inputs {
                        let len = self.nodes[i].data.len();
                        if self.requires(i) {
                            let gi = self.ensure_grad(i);
                            for (g, &v) in gi.iter_mut().zip(&gout[at..at + len]) {
                                *g += v;
                            }
                        }
                        at += len;
                    }
                } else {
                    let rows = self.nodes[id].shape[0];
                    let mut col_at = 0;
                    for &i in &inputs {
                        let w = self.nodes[i].shape[1];
                        if self.requires(i) {
                            let gi = self.ensure_grad(i);
                            for r in 0..rows {
                                for c in 0..w {
                                    gi[r * w + c] += gout[r * cols + col_at + c];
                                }
                            }
                        }
                        col_at += w;
                    }
                }
            }
            Op::Slice { input, axis, start } => {
                if self.requires(input) {
                    let in_cols = self.nodes[input].shape[1];
                    let out_shape = self.nodes[id].shape.clone();
                    let gi = self.ensure_grad(input);
                    if axis == 0 {
                        let cols = out_shape[1];
                        for r in 0..out_shape[0] {
                            for c in 0..cols {
                                gi[(start + r) * in_cols + c] += gout[r * cols + c];
                            }
                        }
                    } else {
                        let w = out_shape[1];
                        for r in 0..out_shape[0] {
                            for c in 0..w {
                                gi[r * in_cols + start + c] += gout[r * w + c];
                            }
                        }
                    }
                }
            }
            Op::Transpose(ai) => {
                if self.requires(ai) {
                    let (m, n) = (self.nodes[id].shape[0], self.nodes[id].shape[1]);
                    let ga = self.ensure_grad(ai);
                    for i in 0..m {
                        for j in 0..n {
                            ga[j * m + i] += gout[i * n + j];
                        }
                    }
                }
            }
            Op::SoftmaxLastDim(ai) => {
                if self.requires(ai) {
                    let y = self.nodes[id].data.clone();
                    let (rows, cols) = rows_cols(&self.nodes[id].shape);
                    let ga = self.ensure_grad(ai);
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &gout[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            ga[r * cols + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (rows, cols) = rows_cols(&self.nodes[x].shape);
                let xd = self.nodes[x].data.clone();
                let gd = self.nodes[gamma].data.clone();
                for r in 0..rows {
                    let row = &xd[r * cols..(r + 1) * cols];
                    let gr = &gout[r * cols..(r + 1) * cols];
                    let mean = row.iter().sum::<f64>() / cols as f64;
                    let var =
                        row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                    let inv = 1.0 / math::sqrt(var + LN_EPS);
                    if self.requires(beta) {
                        let gb = self.ensure_grad(beta);
                        for c in 0..cols {
                            gb[c] += gr[c];
                        }
                    }
                    if self.requires(gamma) {
                        let gg = self.ensure_grad(gamma);
                        for c in 0..cols {
                            gg[c] += gr[c] * (row[c] - mean) * inv;
                        }
                    }
                    if self.requires(x) {
                        // dxhat = gr * gamma; dx = inv*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for c in 0..cols {
                            let xh = (row[c] - mean) * inv;
                            let dxh = gr[c] * gd[c];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh;
                        }
                        mean_dxh /= cols as f64;
                        mean_dxh_xh /= cols as f64;
                        let gx = self.ensure_grad(x);
                        for c in 0..cols {
                            let xh = (row[c] - mean) * inv;
                            let dxh = gr[c] * gd[c];
                            gx[r * cols + c] += inv * (dxh - mean_dxh - xh * mean_dxh_xh);
                        }
                    }
                }
            }
            Op::Gelu(ai) => {
                if self.requires(ai) {
                    let xd = self.nodes[ai].data.clone();
                    let ga = self.ensure_grad(ai);
                    let inv_sqrt_2pi = 1.0 / math::sqrt(2.0 * core::f64::consts::PI);
                    for i in 0..xd.len() {
                        let x = xd[i];
                        let phi = 0.5 * (1.0 + math::erf(x / core::f64::consts::SQRT_2));
                        let pdf = inv_sqrt_2pi * math::exp(-0.5 * x * x);
                        ga[i] += gout[i] * (phi + x * pdf);
                    }
                }
            }
            Op::Sigmoid(ai) => {
                if self.requires(ai) {
                    let y = self.nodes[id].data.clone();
                    let ga = self.ensure_grad(ai);
                    for i in 0..y.len() {
                        ga[i] += gout[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Sum(ai) => {
                if self.requires(ai) {
                    let g = gout[0];
                    let ga = self.ensure_grad(ai);
                    for v in ga.iter_mut() {
                        *v += g;
                    }
                }
            }
            Op::Mean(ai) => {
                if self.requires(ai) {
                    let n = self.nodes[ai].data.len() as f64;
                    let g = gout[0] / n;
                    let ga = self.ensure_grad(ai);
                    for v in ga.iter_mut() {
                        *v += g;
                    }
                }
            }
            Op::MeanAbs(ai) => {
                if self.requires(ai) {
                    let xd = self.nodes[ai].data.clone();
                    let n = xd.len() as f64;
                    let g = gout[0] / n;
                    let ga = self.ensure_grad(ai);
                    for i in 0..xd.len() {
                        ga[i] += g * math::sign(xd[i]);
                    }
                }
            }
            Op::L2Norm(ai) => {
                if self.requires(ai) {
                    let norm = self.nodes[id].data[0];
                    if norm > 0.0 {
                        let xd = self.nodes[ai].data.clone();
                        let g = gout[0] / norm;
                        let ga = self.ensure_grad(ai);
                        for i in 0..xd.len() {
                            ga[i] += g * xd[i];
                        }
                    }
                }
            }
            Op::Reciprocal(ai) => {
                if self.requires(ai) {
                    let xd = self.nodes[ai].data.clone();
                    let ga = self.ensure_grad(ai);
                    for i in 0..xd.len() {
                        ga[i] -= gout[i] / (xd[i] * xd[i]);
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let n = self.nodes[logits].data.len() as f64;
                let g = gout[0] / n;
                if self.requires(logits) {
                    let xd = self.nodes[logits].data.clone();
                    let td = self.nodes[targets].data.clone();
                    let gl = self.ensure_grad(logits);
                    for i in 0..xd.len() {
                        gl[i] += g * (math::sigmoid(xd[i]) - td[i]);
                    }
                }
                if self.requires(targets) {
                    let xd = self.nodes[logits].data.clone();
                    let gt = self.ensure_grad(targets);
                    for i in 0..xd.len() {
                        gt[i] -= g * xd[i];
                    }
                }
            }
        }
    }
}
