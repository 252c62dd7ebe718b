//! Wengert-list reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and enough
//! bookkeeping to push gradients back to its inputs. `backward` walks the list
//! once in reverse.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{shape_err, AutodiffError, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::sparse::SparseRows;
use crate::tensor::Tensor;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    SparseMatMul(SparseRows<T>, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MulRows(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Reshape(Var),
    Patchify(Var, Vec<(usize, usize, usize)>),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    Clip(Var, T, T),
    Min(Var, Var),
    Max(Var, Var),
    Embedding(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    SelectRows(Var, Vec<usize>),
    /// logits, targets, weights, saved softmax, floored mask
    SoftmaxCe(Var, Vec<usize>, Vec<T>, Vec<T>, Vec<bool>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records operations for one forward pass and differentiates them once.
pub struct Tape<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
    checked: bool,
    backward_done: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        let g = self.grads.get(v.idx)?.as_ref()?;
        Tensor::new(self.shapes[v.idx].clone(), g.clone()).ok()
    }

    /// Gradient of `v`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<T> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.idx]))
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), checked: false, backward_done: false }
    }

    /// Checked mode rejects NaN/Inf at every op boundary.
    pub fn checked() -> Self {
        let mut t = Self::new();
        t.checked = true;
        t
    }

    pub fn set_checked(&mut self, on: bool) {
        self.checked = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all recorded nodes. Previously issued vars become foreign.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
        self.id = NEXT_TAPE.fetch_add(1, Ordering::Relaxed);
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(AutodiffError::ForeignVar);
        }
        Ok(())
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert!(v.tape == self.id, "var from another tape");
        &self.nodes[v.idx].value
    }

    fn val(&self, v: Var) -> Result<&Tensor<T>> {
        self.check(v)?;
        Ok(&self.nodes[v.idx].value)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.idx].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(AutodiffError::NonFinite(name));
        }
        let idx = self.nodes.len();
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var { tape: self.id, idx })
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: true });
        Var { tape: self.id, idx }
    }

    /// Constant leaf: no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var { tape: self.id, idx }
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.val(a)?, self.val(b)?);
        let ((m, k), (k2, n)) = (av.dims2(), bv.dims2());
        if k != k2 {
            return shape_err("matmul", format!("{:?} x {:?}", av.shape(), bv.shape()));
        }
        let out = Tensor::matrix(m, n, kernels::matmul(av.data(), bv.data(), m, k, n))?;
        let ng = self.ng(a) || self.ng(b);
        self.push("matmul", out, Op::MatMul(a, b), ng)
    }

    /// Constant sparse `a[m, k]` times `b[k, n]`; gradients flow into `b`.
    pub fn sparse_matmul(&mut self, a: SparseRows<T>, b: Var) -> Result<Var> {
        let bv = self.val(b)?;
        let (k, n) = bv.dims2();
        if a.cols() != k {
            return shape_err("sparse_matmul", format!("[{}, {}] x {:?}", a.rows(), a.cols(), bv.shape()));
        }
        let out = Tensor::matrix(a.rows(), n, a.matmul(bv.data(), n))?;
        let ng = self.ng(b);
        self.push("sparse_matmul", out, Op::SparseMatMul(a, b), ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.val(a)?, self.val(b)?);
        if av.dims2() != bv.dims2() {
            return shape_err(op, format!("{:?} vs {:?}", av.shape(), bv.shape()));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (av, bv) = (&self.nodes[a.idx].value, &self.nodes[b.idx].value);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::matrix(av.rows(), av.cols(), data)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(name, out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("min", a, b, Op::Min(a, b), |x, y| if x <= y { x } else { y })
    }

    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("max", a, b, Op::Max(a, b), |x, y| if x >= y { x } else { y })
    }

    /// `x[m,n] + bias[1,n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.val(x)?, self.val(bias)?);
        let (m, n) = xv.dims2();
        if bv.len() != n {
            return shape_err("add_row", format!("{:?} + {:?}", xv.shape(), bv.shape()));
        }
        let mut data = xv.to_vec();
        for row in data.chunks_mut(n.max(1)) {
            for (d, &b) in row.iter_mut().zip(bv.data()) {
                *d = *d + b;
            }
        }
        let out = Tensor::matrix(m, n, data)?;
        let ng = self.ng(x) || self.ng(bias);
        self.push("add_row", out, Op::AddRow(x, bias), ng)
    }

    /// `x[m,n] * s[m,1]` row scaling.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.val(x)?, self.val(s)?);
        let (m, n) = xv.dims2();
        if sv.len() != m {
            return shape_err("mul_rows", format!("{:?} * {:?}", xv.shape(), sv.shape()));
        }
        let mut data = xv.to_vec();
        for (i, row) in data.chunks_mut(n.max(1)).enumerate() {
            let f = sv.data()[i];
            for d in row.iter_mut() {
                *d = *d * f;
            }
        }
        let out = Tensor::matrix(m, n, data)?;
        let ng = self.ng(x) || self.ng(s);
        self.push("mul_rows", out, Op::MulRows(x, s), ng)
    }

    fn unary(&mut self, name: &'static str, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let xv = self.val(x)?;
        let out = Tensor::matrix(xv.rows(), xv.cols(), xv.data().iter().map(|&v| f(v)).collect())?;
        let ng = self.ng(x);
        self.push(name, out, op, ng)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        self.unary("scale", x, Op::Scale(x, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        self.unary("add_scalar", x, Op::AddScalar(x), |v| v + s)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -T::one())
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, Op::Sigmoid(x), kernels::sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, Op::Exp(x), |v| v.exp())
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, Op::Log(x), |v| v.ln())
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, Op::Square(x), |v| v * v)
    }

    /// Elementwise clamp into `[lo, hi]`. The gradient passes through on the
    /// closed interval and is zero outside it.
    pub fn clip(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        self.unary("clip", x, Op::Clip(x, lo, hi), |v| if v < lo { lo } else if v > hi { hi } else { v })
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.val(x)?;
        let (m, n) = xv.dims2();
        let out = Tensor::matrix(m, n, kernels::softmax_rows(xv.data(), m, n))?;
        let ng = self.ng(x);
        self.push("softmax", out, Op::Softmax(x), ng)
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.val(x)?;
        let (m, n) = xv.dims2();
        let out = Tensor::matrix(m, n, kernels::log_softmax_rows(xv.data(), m, n))?;
        let ng = self.ng(x);
        self.push("log_softmax", out, Op::LogSoftmax(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = kernels::sum(self.val(x)?.data());
        let ng = self.ng(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.val(x)?;
        if xv.is_empty() {
            return shape_err("mean", "empty tensor");
        }
        let out = Tensor::scalar(kernels::sum(xv.data()) / T::lit(xv.len() as f64));
        let ng = self.ng(x);
        self.push("mean", out, Op::Mean(x), ng)
    }

    /// Per-row sum: `[m, n] -> [m, 1]`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let xv = self.val(x)?;
        let (m, n) = xv.dims2();
        let data = (0..m)
            .map(|i| kernels::sum(&xv.data()[i * n..(i + 1) * n]))
            .collect();
        let out = Tensor::matrix(m, 1, data)?;
        let ng = self.ng(x);
        self.push("sum_cols", out, Op::SumCols(x), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat_cols", "no inputs");
        }
        let m = self.val(parts[0])?.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.val(p)?;
            if v.rows() != m {
                return shape_err("concat_cols", format!("row count {} vs {m}", v.rows()));
            }
            widths.push(v.cols());
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[p.idx].value.data()[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push("concat_cols", Tensor::matrix(m, n, data)?, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat_rows", "no inputs");
        }
        let n = self.val(parts[0])?.cols();
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let v = self.val(p)?;
            if v.cols() != n {
                return shape_err("concat_rows", format!("col count {} vs {n}", v.cols()));
            }
            m += v.rows();
            data.extend_from_slice(v.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push("concat_rows", Tensor::matrix(m, n, data)?, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.val(x)?;
        let (m, n) = xv.dims2();
        if start > end || end > n {
            return shape_err("slice_cols", format!("{start}..{end} of {n}"));
        }
        let mut data = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            data.extend_from_slice(&xv.data()[i * n + start..i * n + end]);
        }
        let ng = self.ng(x);
        self.push("slice_cols", Tensor::matrix(m, end - start, data)?, Op::SliceCols(x, start), ng)
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.val(x)?;
        let (m, n) = xv.dims2();
        if start > end || end > m {
            return shape_err("slice_rows", format!("{start}..{end} of {m}"));
        }
        let data = xv.data()[start * n..end * n].to_vec();
        let ng = self.ng(x);
        self.push("slice_rows", Tensor::matrix(end - start, n, data)?, Op::SliceRows(x, start), ng)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.val(x)?.reshape(vec![rows, cols])?;
        let ng = self.ng(x);
        self.push("reshape", out, Op::Reshape(x), ng)
    }

    /// Non-overlapping `k x k` patches of `batch` stacked `h x w` grids
    /// (input `[batch*h*w, c]`, output `[batch*(h/k)*(w/k), k*k*c]`).
    /// Followed by a matmul this is a convolution with kernel = stride = k.
    pub fn patchify(&mut self, x: Var, batch: usize, h: usize, w: usize, k: usize) -> Result<Var> {
        let xv = self.val(x)?;
        let (m, c) = xv.dims2();
        if k == 0 || h % k != 0 || w % k != 0 || m != batch * h * w {
            return shape_err("patchify", format!("{:?} as {batch}x{h}x{w} with k={k}", xv.shape()));
        }
        let idx = kernels::patch_index(batch, h, w, k);
        let rows = batch * (h / k) * (w / k);
        let cols = k * k * c;
        let mut data = vec![T::zero(); rows * cols];
        let src = xv.data();
        for &(orow, slot, irow) in &idx {
            data[orow * cols + slot * c..orow * cols + (slot + 1) * c].copy_from_slice(&src[irow * c..(irow + 1) * c]);
        }
        let ng = self.ng(x);
        self.push("patchify", Tensor::matrix(rows, cols, data)?, Op::Patchify(x, idx), ng)
    }

    /// Row lookup: `table[V, D]`, `indices[N]` -> `[N, D]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = self.val(table)?;
        let (v, d) = tv.dims2();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= v {
                return Err(AutodiffError::Index { op: "embedding", index: i, limit: v });
            }
            data.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        let ng = self.ng(table);
        self.push("embedding", Tensor::matrix(indices.len(), d, data)?, Op::Embedding(table, indices.to_vec()), ng)
    }

    /// Picks `x[i, idx[i]]` for every row: `[m, n] -> [m, 1]`.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.val(x)?;
        let (m, n) = xv.dims2();
        if idx.len() != m {
            return shape_err("gather_cols", format!("{} indices for {m} rows", idx.len()));
        }
        let mut data = Vec::with_capacity(m);
        for (i, &j) in idx.iter().enumerate() {
            if j >= n {
                return Err(AutodiffError::Index { op: "gather_cols", index: j, limit: n });
            }
            data.push(xv.data()[i * n + j]);
        }
        let ng = self.ng(x);
        self.push("gather_cols", Tensor::matrix(m, 1, data)?, Op::GatherCols(x, idx.to_vec()), ng)
    }

    /// Rows whose index appears in `idx`, in that order.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.val(x)?;
        let (m, n) = xv.dims2();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(AutodiffError::Index { op: "select_rows", index: i, limit: m });
            }
            data.extend_from_slice(&xv.data()[i * n..(i + 1) * n]);
        }
        let ng = self.ng(x);
        self.push("select_rows", Tensor::matrix(idx.len(), n, data)?, Op::SelectRows(x, idx.to_vec()), ng)
    }

    /// Rows where `mask` is true.
    pub fn masked_select(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let idx: Vec<usize> = mask.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect();
        if mask.len() != self.val(x)?.rows() {
            return shape_err("masked_select", format!("mask of {} for {:?}", mask.len(), self.val(x)?.shape()));
        }
        self.select_rows(x, &idx)
    }

    /// Fused weighted softmax cross-entropy, `[m, K] -> [m, 1]`:
    /// `out[i] = w[i] * -log(max(softmax(x[i])[t[i]], 1e-12))`.
    /// Rows with zero weight output exactly zero and receive no gradient.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let xv = self.val(logits)?;
        let (m, k) = xv.dims2();
        if targets.len() != m || weights.len() != m {
            return shape_err("softmax_cross_entropy", format!("{m} rows, {} targets, {} weights", targets.len(), weights.len()));
        }
        let probs = kernels::softmax_rows(xv.data(), m, k);
        let logp = kernels::log_softmax_rows(xv.data(), m, k);
        let cap = -T::lit(1e-12).ln();
        let mut out = Vec::with_capacity(m);
        let mut floored = Vec::with_capacity(m);
        for i in 0..m {
            if weights[i] == T::zero() {
                out.push(T::zero());
                floored.push(false);
                continue;
            }
            let t = targets[i];
            if t >= k {
                return Err(AutodiffError::Index { op: "softmax_cross_entropy", index: t, limit: k });
            }
            let nll = -logp[i * k + t];
            let fl = nll > cap;
            floored.push(fl);
            out.push(weights[i] * if fl { cap } else { nll });
        }
        let ng = self.ng(logits);
        self.push(
            "softmax_cross_entropy",
            Tensor::matrix(m, 1, out)?,
            Op::SoftmaxCe(logits, targets.to_vec(), weights.to_vec(), probs, floored),
            ng,
        )
    }

    /// Reverse pass from a `[1, 1]` loss.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        if self.backward_done {
            return Err(AutodiffError::BackwardTwice);
        }
        let lv = &self.nodes[loss.idx].value;
        if lv.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.idx] = Some(vec![T::one()]);
        for i in (0..=loss.idx).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.idx].needs_grad {
                return;
            }
            let slot = grads[v.idx].get_or_insert_with(|| vec![T::zero(); nodes[v.idx].value.len()]);
            f(slot);
        };
        let value = |v: Var| &nodes[v.idx].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = value(*a).dims2();
                let n = value(*b).cols();
                let (ad, bd) = (value(*a).data(), value(*b).data());
                acc(*a, &mut |da| kernels::matmul_grad_a(g, bd, da, m, k, n));
                acc(*b, &mut |db| kernels::matmul_grad_b(ad, g, db, m, k, n));
            }
            Op::SparseMatMul(a, b) => {
                let n = value(*b).cols();
                acc(*b, &mut |db| a.matmul_grad_b(g, db, n));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    for (x, &y) in d.iter_mut().zip(g) {
                        *x = *x - y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (value(*a).data(), value(*b).data());
                acc(*a, &mut |d| {
                    for ((x, &y), &o) in d.iter_mut().zip(g).zip(bd) {
                        *x = *x + y * o;
                    }
                });
                acc(*b, &mut |d| {
                    for ((x, &y), &o) in d.iter_mut().zip(g).zip(ad) {
                        *x = *x + y * o;
                    }
                });
            }
            Op::Min(a, b) | Op::Max(a, b) => {
                let is_min = matches!(node.op, Op::Min(..));
                let (ad, bd) = (value(*a).data(), value(*b).data());
                let pick_a = |j: usize| if is_min { ad[j] <= bd[j] } else { ad[j] >= bd[j] };
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        if pick_a(j) {
                            d[j] = d[j] + g[j];
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for j in 0..d.len() {
                        if !pick_a(j) {
                            d[j] = d[j] + g[j];
                        }
                    }
                });
            }
            Op::AddRow(x, b) => {
                let n = out.cols();
                acc(*x, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    for row in g.chunks(n.max(1)) {
                        add_into(d, row);
                    }
                });
            }
            Op::MulRows(x, s) => {
                let n = out.cols();
                let (xd, sd) = (value(*x).data(), value(*s).data());
                acc(*x, &mut |d| {
                    for (r, (drow, grow)) in d.chunks_mut(n.max(1)).zip(g.chunks(n.max(1))).enumerate() {
                        for (dv, &gv) in drow.iter_mut().zip(grow) {
                            *dv = *dv + gv * sd[r];
                        }
                    }
                });
                acc(*s, &mut |d| {
                    for r in 0..d.len() {
                        let mut t = T::zero();
                        for j in 0..n {
                            t = t + g[r * n + j] * xd[r * n + j];
                        }
                        d[r] = d[r] + t;
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |d| {
                for (dv, &gv) in d.iter_mut().zip(g) {
                    *dv = *dv + gv * *s;
                }
            }),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::ConcatCols(parts) => {
                let m = out.rows();
                let n = out.cols();
                let mut off = 0;
                for p in parts {
                    let w = value(*p).cols();
                    acc(*p, &mut |d| {
                        for r in 0..m {
                            add_into(&mut d[r * w..(r + 1) * w], &g[r * n + off..r * n + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = value(*p).len();
                    acc(*p, &mut |d| add_into(d, &g[off..off + len]));
                    off += len;
                }
            }
            Op::SliceCols(x, start) => {
                let (m, w) = out.dims2();
                let n = value(*x).cols();
                acc(*x, &mut |d| {
                    for r in 0..m {
                        add_into(&mut d[r * n + start..r * n + start + w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::SliceRows(x, start) => {
                let n = out.cols();
                acc(*x, &mut |d| add_into(&mut d[start * n..start * n + g.len()], g));
            }
            Op::Patchify(x, idx) => {
                let c = value(*x).cols();
                let cols = out.cols();
                acc(*x, &mut |d| {
                    for &(orow, slot, irow) in idx {
                        add_into(&mut d[irow * c..(irow + 1) * c], &g[orow * cols + slot * c..orow * cols + (slot + 1) * c]);
                    }
                });
            }
            Op::Sigmoid(x) => acc(*x, &mut |d| {
                for ((dv, &gv), &y) in d.iter_mut().zip(g).zip(out.data()) {
                    *dv = *dv + gv * y * (T::one() - y);
                }
            }),
            Op::Tanh(x) => acc(*x, &mut |d| {
                for ((dv, &gv), &y) in d.iter_mut().zip(g).zip(out.data()) {
                    *dv = *dv + gv * (T::one() - y * y);
                }
            }),
            Op::Relu(x) => {
                let xd = value(*x).data();
                acc(*x, &mut |d| {
                    for ((dv, &gv), &xv) in d.iter_mut().zip(g).zip(xd) {
                        if xv > T::zero() {
                            *dv = *dv + gv;
                        }
                    }
                })
            }
            Op::Exp(x) => acc(*x, &mut |d| {
                for ((dv, &gv), &y) in d.iter_mut().zip(g).zip(out.data()) {
                    *dv = *dv + gv * y;
                }
            }),
            Op::Log(x) => {
                let xd = value(*x).data();
                acc(*x, &mut |d| {
                    for ((dv, &gv), &xv) in d.iter_mut().zip(g).zip(xd) {
                        *dv = *dv + gv / xv;
                    }
                })
            }
            Op::Square(x) => {
                let xd = value(*x).data();
                acc(*x, &mut |d| {
                    for ((dv, &gv), &xv) in d.iter_mut().zip(g).zip(xd) {
                        *dv = *dv + gv * (xv + xv);
                    }
                })
            }
            Op::Clip(x, lo, hi) => {
                let xd = value(*x).data();
                acc(*x, &mut |d| {
                    for ((dv, &gv), &xv) in d.iter_mut().zip(g).zip(xd) {
                        if xv >= *lo && xv <= *hi {
                            *dv = *dv + gv;
                        }
                    }
                })
            }
            Op::Softmax(x) => {
                let (m, n) = out.dims2();
                let y = out.data();
                acc(*x, &mut |d| {
                    for r in 0..m {
                        let mut dot = T::zero();
                        for j in 0..n {
                            dot = dot + g[r * n + j] * y[r * n + j];
                        }
                        for j in 0..n {
                            d[r * n + j] = d[r * n + j] + y[r * n + j] * (g[r * n + j] - dot);
                        }
                    }
                })
            }
            Op::LogSoftmax(x) => {
                let (m, n) = out.dims2();
                let y = out.data();
                acc(*x, &mut |d| {
                    for r in 0..m {
                        let mut s = T::zero();
                        for j in 0..n {
                            s = s + g[r * n + j];
                        }
                        for j in 0..n {
                            d[r * n + j] = d[r * n + j] + g[r * n + j] - y[r * n + j].exp() * s;
                        }
                    }
                })
            }
            Op::Sum(x) => acc(*x, &mut |d| {
                for dv in d.iter_mut() {
                    *dv = *dv + g[0];
                }
            }),
            Op::Mean(x) => {
                let n = T::lit(value(*x).len() as f64);
                acc(*x, &mut |d| {
                    for dv in d.iter_mut() {
                        *dv = *dv + g[0] / n;
                    }
                })
            }
            Op::SumCols(x) => {
                let n = value(*x).cols();
                acc(*x, &mut |d| {
                    for (r, row) in d.chunks_mut(n.max(1)).enumerate() {
                        for dv in row.iter_mut() {
                            *dv = *dv + g[r];
                        }
                    }
                })
            }
            Op::Embedding(table, indices) => {
                let dcol = out.cols();
                acc(*table, &mut |d| {
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut d[i * dcol..(i + 1) * dcol], &g[r * dcol..(r + 1) * dcol]);
                    }
                })
            }
            Op::GatherCols(x, idx) => {
                let n = value(*x).cols();
                acc(*x, &mut |d| {
                    for (r, &j) in idx.iter().enumerate() {
                        d[r * n + j] = d[r * n + j] + g[r];
                    }
                })
            }
            Op::SelectRows(x, idx) => {
                let n = out.cols();
                acc(*x, &mut |d| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut d[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                })
            }
            Op::SoftmaxCe(x, targets, weights, probs, floored) => {
                let k = value(*x).cols();
                acc(*x, &mut |d| {
                    for r in 0..targets.len() {
                        if weights[r] == T::zero() || floored[r] {
                            continue;
                        }
                        let f = g[r] * weights[r];
                        for j in 0..k {
                            let onehot = if j == targets[r] { T::one() } else { T::zero() };
                            d[r * k + j] = d[r * k + j] + f * (probs[r * k + j] - onehot);
                        }
                    }
                })
            }
        }
    }
}

fn add_into<T: Scalar>(d: &mut [T], g: &[T]) {
    for (x, &y) in d.iter_mut().zip(g) {
        *x = *x + y;
    }
}
