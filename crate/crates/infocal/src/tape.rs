//! Reverse-mode automatic differentiation on a flat Wengert tape.
//!
//! A `Tape` records every forward operation as a node; `backward` walks the
//! nodes in reverse and accumulates gradients into the leaves that were bound
//! as parameters. Tapes are built per batch and thrown away: parameters live
//! outside the tape (see `nn::ParamSet`) and are bound by key each forward
//! pass.
//!
//! Numeric safety rules, applied inside the ops so every output of a finite
//! input is finite:
//! - `log` clamps its input to at least `EPS_CLAMP`,
//! - `sigmoid`, `tanh` and `softmax_lastdim` clamp logits to `[-30, 30]`,
//! - `exp` clamps its input to at most `30`.
//!
//! The clamps are part of the function being differentiated: outside the
//! clamped region the propagated gradient is zero.

use thiserror::Error;

use crate::tensor::{matmul, Scalar, Tensor};

/// Lower clamp for `log` inputs.
pub const EPS_CLAMP: f64 = 1e-7;
/// Symmetric clamp for sigmoid/tanh/softmax logits and the upper clamp for `exp`.
pub const LOGIT_CLAMP: f64 = 30.0;
/// Probabilities emitted by selector and discriminator are squashed into
/// `[PROB_FLOOR, 1 - PROB_FLOOR]`.
pub const PROB_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("{op}: shape mismatch {shapes:?}")]
    ShapeMismatch { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("gather_rows: row id {id} out of range for {rows} rows")]
    RowOutOfRange { id: usize, rows: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward may run only once per tape")]
    BackwardTwice,
    #[error("concat requires at least one input")]
    EmptyConcat,
    #[error("parameter key {key} bound twice on one tape")]
    DuplicateParam { key: usize },
}

pub type TapeResult<T> = Result<T, TapeError>;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    SoftmaxLastDim(usize),
    Concat { axis: usize, inputs: Vec<usize> },
    GatherRows { src: usize, ids: Vec<usize> },
    Sum(usize),
    Mean(usize),
    Broadcast(usize),
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
    /// node index -> parameter key, for leaves bound via `param`.
    param_leaves: Vec<(usize, usize)>,
    backward_done: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_leaves: Vec::new(),
            backward_done: false,
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    /// Record a constant leaf; it never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(S::from_f64(v)))
    }

    /// Bind a parameter tensor under `key`. Gradients for it are collected by
    /// `param_grads` after `backward`. Binding the same key twice is rejected;
    /// reuse the returned `Var` instead (shared use accumulates gradients).
    pub fn param(&mut self, key: usize, value: &Tensor<S>) -> TapeResult<Var> {
        if self.param_leaves.iter().any(|&(_, k)| k == key) {
            return Err(TapeError::DuplicateParam { key });
        }
        let var = self.push(value.clone(), Op::Leaf, true);
        self.param_leaves.push((var.0, key));
        Ok(var)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Gradient of the loss w.r.t. `v`, if backward has run and `v` was on a
    /// differentiable path.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }

    // ── primitive operations ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> TapeResult<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(TapeError::ShapeMismatch {
                op: "matmul",
                shapes: vec![ta.shape().to_vec(), tb.shape().to_vec()],
            });
        }
        let value = matmul(ta, tb);
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(value, Op::MatMul(a.0, b.0), needs))
    }

    fn elementwise_pair(&mut self, a: Var, b: Var, name: &'static str) -> TapeResult<()> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(TapeError::ShapeMismatch {
                op: name,
                shapes: vec![ta.shape().to_vec(), tb.shape().to_vec()],
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> TapeResult<Var> {
        self.elementwise_pair(a, b, "add")?;
        let value = {
            let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
            Tensor::new(ta.shape().to_vec(), data)
        };
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(value, Op::Add(a.0, b.0), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TapeResult<Var> {
        self.elementwise_pair(a, b, "sub")?;
        let value = {
            let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x - y).collect();
            Tensor::new(ta.shape().to_vec(), data)
        };
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(value, Op::Sub(a.0, b.0), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> TapeResult<Var> {
        self.elementwise_pair(a, b, "mul")?;
        let value = {
            let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
            Tensor::new(ta.shape().to_vec(), data)
        };
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(value, Op::Mul(a.0, b.0), needs))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let clamp = S::from_f64(LOGIT_CLAMP);
        let value = self.nodes[x.0].value.map(|v| {
            let c = v.clamp_s(-clamp, clamp);
            S::ONE / (S::ONE + (-c).exp())
        });
        let needs = self.needs(x.0);
        self.push(value, Op::Sigmoid(x.0), needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let clamp = S::from_f64(LOGIT_CLAMP);
        let value = self.nodes[x.0].value.map(|v| v.clamp_s(-clamp, clamp).tanh());
        let needs = self.needs(x.0);
        self.push(value, Op::Tanh(x.0), needs)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let hi = S::from_f64(LOGIT_CLAMP);
        let value = self.nodes[x.0].value.map(|v| v.min_s(hi).exp());
        let needs = self.needs(x.0);
        self.push(value, Op::Exp(x.0), needs)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let eps = S::from_f64(EPS_CLAMP);
        let value = self.nodes[x.0].value.map(|v| v.max_s(eps).ln());
        let needs = self.needs(x.0);
        self.push(value, Op::Log(x.0), needs)
    }

    /// Softmax over the last dimension of a rank-2 tensor, one distribution
    /// per row. Logits are clamped to `[-30, 30]` before the stable softmax.
    pub fn softmax_lastdim(&mut self, x: Var) -> TapeResult<Var> {
        let tx = &self.nodes[x.0].value;
        if tx.rank() != 2 || tx.cols() == 0 {
            return Err(TapeError::ShapeMismatch {
                op: "softmax_lastdim",
                shapes: vec![tx.shape().to_vec()],
            });
        }
        let clamp = S::from_f64(LOGIT_CLAMP);
        let (r, c) = (tx.rows(), tx.cols());
        let mut data = vec![S::ZERO; r * c];
        for i in 0..r {
            let row = &tx.data()[i * c..(i + 1) * c];
            let mut mx = S::from_f64(f64::NEG_INFINITY);
            let clamped: Vec<S> = row.iter().map(|&v| v.clamp_s(-clamp, clamp)).collect();
            for &v in &clamped {
                mx = mx.max_s(v);
            }
            let mut denom = S::ZERO;
            for (j, &v) in clamped.iter().enumerate() {
                let e = (v - mx).exp();
                data[i * c + j] = e;
                denom = denom + e;
            }
            for j in 0..c {
                data[i * c + j] = data[i * c + j] / denom;
            }
        }
        let needs = self.needs(x.0);
        Ok(self.push(Tensor::new(vec![r, c], data), Op::SoftmaxLastDim(x.0), needs))
    }

    /// Concatenate rank-2 tensors along `axis` (0 = stack rows, 1 = widen).
    pub fn concat(&mut self, axis: usize, inputs: &[Var]) -> TapeResult<Var> {
        if inputs.is_empty() {
            return Err(TapeError::EmptyConcat);
        }
        let shapes: Vec<Vec<usize>> = inputs
            .iter()
            .map(|v| self.nodes[v.0].value.shape().to_vec())
            .collect();
        let first = &shapes[0];
        let ok = axis < 2
            && first.len() == 2
            && shapes.iter().all(|s| s.len() == 2 && s[1 - axis] == first[1 - axis]);
        if !ok {
            return Err(TapeError::ShapeMismatch { op: "concat", shapes });
        }
        let fixed = first[1 - axis];
        let total: usize = shapes.iter().map(|s| s[axis]).sum();
        let (rows, cols) = if axis == 0 { (total, fixed) } else { (fixed, total) };
        let mut data = vec![S::ZERO; rows * cols];
        if axis == 0 {
            let mut at = 0;
            for v in inputs {
                let t = &self.nodes[v.0].value;
                data[at..at + t.numel()].copy_from_slice(t.data());
                at += t.numel();
            }
        } else {
            let mut col_at = 0;
            for v in inputs {
                let t = &self.nodes[v.0].value;
                let w = t.cols();
                for i in 0..rows {
                    data[i * cols + col_at..i * cols + col_at + w]
                        .copy_from_slice(&t.data()[i * w..(i + 1) * w]);
                }
                col_at += w;
            }
        }
        let needs = inputs.iter().any(|v| self.needs(v.0));
        Ok(self.push(
            Tensor::new(vec![rows, cols], data),
            Op::Concat { axis, inputs: inputs.iter().map(|v| v.0).collect() },
            needs,
        ))
    }

    /// Gather rows of a rank-2 tensor by index; the embedding lookup.
    /// Duplicate ids are allowed and accumulate gradient into the same row.
    pub fn gather_rows(&mut self, src: Var, ids: &[usize]) -> TapeResult<Var> {
        let ts = &self.nodes[src.0].value;
        if ts.rank() != 2 {
            return Err(TapeError::ShapeMismatch {
                op: "gather_rows",
                shapes: vec![ts.shape().to_vec()],
            });
        }
        let (rows, cols) = (ts.rows(), ts.cols());
        for &id in ids {
            if id >= rows {
                return Err(TapeError::RowOutOfRange { id, rows });
            }
        }
        let mut data = vec![S::ZERO; ids.len() * cols];
        for (k, &id) in ids.iter().enumerate() {
            data[k * cols..(k + 1) * cols].copy_from_slice(&ts.data()[id * cols..(id + 1) * cols]);
        }
        let needs = self.needs(src.0);
        Ok(self.push(
            Tensor::new(vec![ids.len(), cols], data),
            Op::GatherRows { src: src.0, ids: ids.to_vec() },
            needs,
        ))
    }

    /// Sum of all elements, yielding a rank-0 scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = S::ZERO;
        for &v in self.nodes[x.0].value.data() {
            acc = acc + v;
        }
        let needs = self.needs(x.0);
        self.push(Tensor::scalar(acc), Op::Sum(x.0), needs)
    }

    /// Mean of all elements, yielding a rank-0 scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.numel().max(1);
        let mut acc = S::ZERO;
        for &v in self.nodes[x.0].value.data() {
            acc = acc + v;
        }
        let needs = self.needs(x.0);
        self.push(
            Tensor::scalar(acc / S::from_f64(n as f64)),
            Op::Mean(x.0),
            needs,
        )
    }

    /// Expand a tensor to `target` shape. Every axis must already match or be
    /// 1 in the source; a rank-0 scalar expands to any shape. The gradient
    /// sums back over the expanded axes.
    pub fn broadcast(&mut self, x: Var, target: &[usize]) -> TapeResult<Var> {
        let tx = &self.nodes[x.0].value;
        let src_shape = tx.shape().to_vec();
        let compatible = if src_shape.is_empty() {
            true
        } else {
            src_shape.len() == target.len()
                && src_shape.iter().zip(target).all(|(&s, &t)| s == t || s == 1)
        };
        if !compatible {
            return Err(TapeError::ShapeMismatch {
                op: "broadcast",
                shapes: vec![src_shape, target.to_vec()],
            });
        }
        let value = broadcast_to(tx, target);
        let needs = self.needs(x.0);
        Ok(self.push(value, Op::Broadcast(x.0), needs))
    }

    // ── composite helpers (no new op kinds) ───────────────────────────────

    /// `x * c` with a scalar constant.
    pub fn scale(&mut self, x: Var, c: f64) -> TapeResult<Var> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        let s = self.scalar(c);
        let b = self.broadcast(s, &shape)?;
        self.mul(x, b)
    }

    /// `x + c` with a scalar constant.
    pub fn add_scalar(&mut self, x: Var, c: f64) -> TapeResult<Var> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        let s = self.scalar(c);
        let b = self.broadcast(s, &shape)?;
        self.add(x, b)
    }

    /// `1 - x` elementwise.
    pub fn one_minus(&mut self, x: Var) -> TapeResult<Var> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        let s = self.scalar(1.0);
        let b = self.broadcast(s, &shape)?;
        self.sub(b, x)
    }

    /// Smooth squash of logits into `[PROB_FLOOR, 1 - PROB_FLOOR]`:
    /// `p = PROB_FLOOR + (1 - 2 PROB_FLOOR) * sigmoid(x)`. Keeps `log p` and
    /// `log (1-p)` finite without a kink, and maps logit 0 to exactly 0.5.
    pub fn squash_prob(&mut self, logits: Var) -> TapeResult<Var> {
        let s = self.sigmoid(logits);
        let scaled = self.scale(s, 1.0 - 2.0 * PROB_FLOOR)?;
        self.add_scalar(scaled, PROB_FLOOR)
    }

    /// `x @ w + b` with the bias row broadcast over rows of the product.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> TapeResult<Var> {
        let prod = self.matmul(x, w)?;
        let shape = self.nodes[prod.0].value.shape().to_vec();
        let bb = self.broadcast(b, &shape)?;
        self.add(prod, bb)
    }

    /// Softplus `log(1 + exp(x))`, composed from primitives.
    pub fn softplus(&mut self, x: Var) -> TapeResult<Var> {
        let e = self.exp(x);
        let p1 = self.add_scalar(e, 1.0)?;
        Ok(self.log(p1))
    }

    // ── backward ──────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. May run once per tape; gradients for
    /// parameter leaves are then available via `grad` / `param_grads`.
    pub fn backward(&mut self, loss: Var) -> TapeResult<()> {
        if self.backward_done {
            return Err(TapeError::BackwardTwice);
        }
        let lt = &self.nodes[loss.0].value;
        if !lt.is_scalar_like() {
            return Err(TapeError::NonScalarLoss { shape: lt.shape().to_vec() });
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(Tensor::new(lt.shape().to_vec(), vec![S::ONE]));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else { continue };
            self.propagate(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: usize, delta: Tensor<S>) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut self.grads[id] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a = *a + *b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, id: usize, g: &Tensor<S>) {
        let clamp = S::from_f64(LOGIT_CLAMP);
        let eps = S::from_f64(EPS_CLAMP);
        // Lift the op out to satisfy the borrow checker; values are read
        // through immutable borrows before `accumulate` mutates grads.
        match &self.nodes[id].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let da = matmul(g, &self.nodes[b].value.transposed());
                let db = matmul(&self.nodes[a].value.transposed(), g);
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            &Op::Add(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.map(|v| -v));
            }
            &Op::Mul(a, b) => {
                let da = {
                    let tb = &self.nodes[b].value;
                    Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(tb.data()).map(|(&gv, &bv)| gv * bv).collect(),
                    )
                };
                let db = {
                    let ta = &self.nodes[a].value;
                    Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(ta.data()).map(|(&gv, &av)| gv * av).collect(),
                    )
                };
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            &Op::Sigmoid(x) => {
                let dx = {
                    let tx = &self.nodes[x].value;
                    let ty = &self.nodes[id].value;
                    Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(ty.data().iter().zip(tx.data()))
                            .map(|(&gv, (&yv, &xv))| {
                                if xv >= -clamp && xv <= clamp {
                                    gv * yv * (S::ONE - yv)
                                } else {
                                    S::ZERO
                                }
                            })
                            .collect(),
                    )
                };
                self.accumulate(x, dx);
            }
            &Op::Tanh(x) => {
                let dx = {
                    let tx = &self.nodes[x].value;
                    let ty = &self.nodes[id].value;
                    Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(ty.data().iter().zip(tx.data()))
                            .map(|(&gv, (&yv, &xv))| {
                                if xv >= -clamp && xv <= clamp {
                                    gv * (S::ONE - yv * yv)
                                } else {
                                    S::ZERO
                                }
                            })
                            .collect(),
                    )
                };
                self.accumulate(x, dx);
            }
            &Op::Exp(x) => {
                let dx = {
                    let tx = &self.nodes[x].value;
                    let ty = &self.nodes[id].value;
                    Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(ty.data().iter().zip(tx.data()))
                            .map(|(&gv, (&yv, &xv))| if xv <= clamp { gv * yv } else { S::ZERO })
                            .collect(),
                    )
                };
                self.accumulate(x, dx);
            }
            &Op::Log(x) => {
                let dx = {
                    let tx = &self.nodes[x].value;
                    Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(tx.data())
                            .map(|(&gv, &xv)| if xv >= eps { gv / xv } else { S::ZERO })
                            .collect(),
                    )
                };
                self.accumulate(x, dx);
            }
            &Op::SoftmaxLastDim(x) => {
                let dx = {
                    let tx = &self.nodes[x].value;
                    let ty = &self.nodes[id].value;
                    let (r, c) = (ty.rows(), ty.cols());
                    let mut out = vec![S::ZERO; r * c];
                    for i in 0..r {
                        let yrow = &ty.data()[i * c..(i + 1) * c];
                        let grow = &g.data()[i * c..(i + 1) * c];
                        let mut dot = S::ZERO;
                        for j in 0..c {
                            dot = dot + grow[j] * yrow[j];
                        }
                        for j in 0..c {
                            let xv = tx.data()[i * c + j];
                            out[i * c + j] = if xv >= -clamp && xv <= clamp {
                                yrow[j] * (grow[j] - dot)
                            } else {
                                S::ZERO
                            };
                        }
                    }
                    Tensor::new(vec![r, c], out)
                };
                self.accumulate(x, dx);
            }
            Op::Concat { axis, inputs } => {
                let axis = *axis;
                let inputs = inputs.clone();
                let cols = self.nodes[id].value.cols();
                let rows = self.nodes[id].value.rows();
                let mut offset = 0;
                for inp in inputs {
                    let t_shape = self.nodes[inp].value.shape().to_vec();
                    let (ir, ic) = (t_shape[0], t_shape[1]);
                    let mut part = vec![S::ZERO; ir * ic];
                    if axis == 0 {
                        part.copy_from_slice(&g.data()[offset * cols..(offset + ir) * cols]);
                        offset += ir;
                    } else {
                        for i in 0..rows {
                            part[i * ic..(i + 1) * ic]
                                .copy_from_slice(&g.data()[i * cols + offset..i * cols + offset + ic]);
                        }
                        offset += ic;
                    }
                    self.accumulate(inp, Tensor::new(t_shape, part));
                }
            }
            Op::GatherRows { src, ids } => {
                let src = *src;
                let ids = ids.clone();
                let src_shape = self.nodes[src].value.shape().to_vec();
                let cols = src_shape[1];
                let mut scat = vec![S::ZERO; src_shape[0] * cols];
                for (k, &rid) in ids.iter().enumerate() {
                    for j in 0..cols {
                        scat[rid * cols + j] = scat[rid * cols + j] + g.data()[k * cols + j];
                    }
                }
                self.accumulate(src, Tensor::new(src_shape, scat));
            }
            &Op::Sum(x) => {
                let shape = self.nodes[x].value.shape().to_vec();
                let gv = g.data()[0];
                let n: usize = shape.iter().product();
                self.accumulate(x, Tensor::new(shape, vec![gv; n]));
            }
            &Op::Mean(x) => {
                let shape = self.nodes[x].value.shape().to_vec();
                let n: usize = shape.iter().product::<usize>().max(1);
                let gv = g.data()[0] / S::from_f64(n as f64);
                self.accumulate(x, Tensor::new(shape, vec![gv; n]));
            }
            &Op::Broadcast(x) => {
                let src_shape = self.nodes[x].value.shape().to_vec();
                self.accumulate(x, reduce_to(g, &src_shape));
            }
        }
    }

    /// Gradients of all parameter leaves as `(key, gradient)`; parameters that
    /// did not influence the loss report zero gradients.
    pub fn param_grads(&self) -> Vec<(usize, Tensor<S>)> {
        self.param_leaves
            .iter()
            .map(|&(node, key)| {
                let grad = match &self.grads[node] {
                    Some(g) => g.clone(),
                    None => Tensor::zeros(self.nodes[node].value.shape().to_vec()),
                };
                (key, grad)
            })
            .collect()
    }
}

fn broadcast_to<S: Scalar>(src: &Tensor<S>, target: &[usize]) -> Tensor<S> {
    let n: usize = target.iter().product();
    if src.rank() == 0 {
        return Tensor::new(target.to_vec(), vec![src.item(); n]);
    }
    if src.shape() == target {
        let mut out = src.clone();
        out.requires_grad = false;
        return out;
    }
    // Rank-2 expansion over row and/or column axes of size 1.
    let (sr, sc) = (src.rows(), src.cols());
    let (tr, tc) = (target[0], target[1]);
    let mut data = vec![S::ZERO; n];
    for i in 0..tr {
        let si = if sr == 1 { 0 } else { i };
        for j in 0..tc {
            let sj = if sc == 1 { 0 } else { j };
            data[i * tc + j] = src.data()[si * sc + sj];
        }
    }
    Tensor::new(target.to_vec(), data)
}

fn reduce_to<S: Scalar>(g: &Tensor<S>, src_shape: &[usize]) -> Tensor<S> {
    if src_shape.is_empty() {
        let mut acc = S::ZERO;
        for &v in g.data() {
            acc = acc + v;
        }
        return Tensor::scalar(acc);
    }
    if g.shape() == src_shape {
        return g.clone();
    }
    let (gr, gc) = (g.rows(), g.cols());
    let (sr, sc) = (src_shape[0], src_shape[1]);
    let mut data = vec![S::ZERO; sr * sc];
    for i in 0..gr {
        let si = if sr == 1 { 0 } else { i };
        for j in 0..gc {
            let sj = if sc == 1 { 0 } else { j };
            data[si * sc + sj] = data[si * sc + sj] + g.data()[i * gc + j];
        }
    }
    Tensor::new(src_shape.to_vec(), data)
}
