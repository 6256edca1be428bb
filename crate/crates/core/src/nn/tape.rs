//! Reverse-mode automatic differentiation on a per-step tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar walks the records in reverse creation order,
//! which is a valid topological order, so gradient accumulation is
//! deterministic.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use super::conv::{col2im, im2col, ConvGeom, Frame, CHUNK_FRAMES};
use super::params::{ParamId, ParamStore};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Silu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    ClampMin(Var, f64),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    LayerNorm(Var, f64),
    Conv(Var, Var, Frame, ConvGeom),
    ConvT(Var, Var, Frame, ConvGeom),
    Bce(Var, Rc<Tensor<T>>, Option<Rc<Tensor<T>>>),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Silu(..) => "silu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::ClampMin(..) => "clamp_min",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Reshape(..) => "reshape",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::SumCols(..) => "sum_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::LayerNorm(..) => "layer_norm",
            Op::Conv(..) => "conv2d",
            Op::ConvT(..) => "conv_transpose2d",
            Op::Bce(..) => "bce_with_logits",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::MulCol(a, b)
            | Op::MatMul(a, b)
            | Op::Conv(a, b, ..)
            | Op::ConvT(a, b, ..) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Silu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::ClampMin(a, _)
            | Op::Softmax(a, _)
            | Op::LogSoftmax(a, _)
            | Op::Reshape(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::SumCols(a)
            | Op::SliceCols(a, _)
            | Op::SliceRows(a, _)
            | Op::LayerNorm(a, _)
            | Op::Bce(a, ..) => vec![*a],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

enum Frozen<T> {
    Off,
    Record(Vec<Tensor<T>>),
    Replay { values: Vec<Tensor<T>>, next: usize },
}

/// Gradient of a scalar with respect to every leaf that required one.
pub struct Gradients<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients for each parameter of `store`, in parameter order. Parameters
    /// that did not take part in the graph get `None`.
    pub fn for_store(&self, tape: &Tape<T>, store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        let leaves = tape.param_leaves.borrow();
        (0..store.len())
            .map(|i| {
                leaves
                    .get(&(store.uid(), i))
                    .and_then(|v| self.wrt(*v).cloned())
            })
            .collect()
    }
}

pub struct Tape<T = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    param_leaves: RefCell<HashMap<(u64, usize), Var>>,
    frozen: RefCell<Frozen<T>>,
    non_finite: RefCell<Option<String>>,
    grad_enabled: Cell<bool>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn acc<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], v: Var, len: usize) -> &'a mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            param_leaves: RefCell::new(HashMap::new()),
            frozen: RefCell::new(Frozen::Off),
            non_finite: RefCell::new(None),
            grad_enabled: Cell::new(true),
        }
    }

    /// A tape that never tracks gradients; used for rollouts and inference.
    pub fn inference() -> Self {
        let t = Self::new();
        t.grad_enabled.set(false);
        t
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op<T>, value: Tensor<T>) -> Var {
        if !value.all_finite() {
            let mut nf = self.non_finite.borrow_mut();
            if nf.is_none() {
                *nf = Some(format!("{} -> {:?}", op.name(), value.shape()));
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = self.grad_enabled.get() && op.parents().iter().any(|p| nodes[p.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn leaf(&self, value: Tensor<T>, needs_grad: bool) -> Var {
        let v = self.push(Op::Leaf, value);
        self.nodes.borrow_mut()[v.0].needs_grad = needs_grad && self.grad_enabled.get();
        v
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.constant(Tensor::scalar(T::of(value)))
    }

    /// Leaf for parameter `id` of `store`; repeated calls return the same var.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        let key = (store.uid(), id.index());
        if let Some(v) = self.param_leaves.borrow().get(&key) {
            return *v;
        }
        let v = self.leaf(store.get(id).clone(), true);
        self.param_leaves.borrow_mut().insert(key, v);
        v
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// First operation that produced a NaN or infinity, if any.
    pub fn non_finite(&self) -> Option<String> {
        self.non_finite.borrow().clone()
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        match self.non_finite() {
            Some(op) => Err(Error::NonFinite(format!("{context}: {op}"))),
            None => Ok(()),
        }
    }

    // ---- frozen values -------------------------------------------------

    /// Records every subsequently frozen value (stop-gradients and samples).
    pub fn record_frozen(&self) {
        *self.frozen.borrow_mut() = Frozen::Record(Vec::new());
    }

    pub fn take_frozen(&self) -> Vec<Tensor<T>> {
        match std::mem::replace(&mut *self.frozen.borrow_mut(), Frozen::Off) {
            Frozen::Record(v) => v,
            _ => Vec::new(),
        }
    }

    /// Substitutes previously recorded values, in order, for frozen values.
    /// Finite-difference checks use this to hold stop-gradient branches and
    /// discrete samples at their base-point values.
    pub fn replay_frozen(&self, values: Vec<Tensor<T>>) {
        *self.frozen.borrow_mut() = Frozen::Replay { values, next: 0 };
    }

    pub fn freeze_with(&self, compute: impl FnOnce() -> Tensor<T>) -> Tensor<T> {
        let mut frozen = self.frozen.borrow_mut();
        match &mut *frozen {
            Frozen::Off => compute(),
            Frozen::Record(values) => {
                let t = compute();
                values.push(t.clone());
                t
            }
            Frozen::Replay { values, next } => {
                let t = values
                    .get(*next)
                    .cloned()
                    .expect("frozen replay ran out of recorded values");
                *next += 1;
                t
            }
        }
    }

    /// Stop-gradient: a constant copy of `v`.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        let t = self.freeze_with(|| (*value).clone());
        self.constant(t)
    }

    // ---- elementwise -----------------------------------------------------

    fn binary_same(&self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "{name}: shapes {:?} vs {:?}", va.shape(), vb.shape());
        let out = Tensor::new(va.shape(), zip_map(va.data(), vb.data(), f));
        self.push(op, out)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `x + b` with `b` broadcast over rows (length = last dim of `x`).
    pub fn add_row(&self, x: Var, b: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(b));
        let c = vx.cols();
        assert_eq!(vb.len(), c, "add_row: bias length {} vs cols {c}", vb.len());
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + vb.data()[i % c])
            .collect();
        self.push(Op::AddRow(x, b), Tensor::new(vx.shape(), data))
    }

    /// `x * g` with `g` broadcast over rows.
    pub fn mul_row(&self, x: Var, g: Var) -> Var {
        let (vx, vg) = (self.value(x), self.value(g));
        let c = vx.cols();
        assert_eq!(vg.len(), c, "mul_row: gain length {} vs cols {c}", vg.len());
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * vg.data()[i % c])
            .collect();
        self.push(Op::MulRow(x, g), Tensor::new(vx.shape(), data))
    }

    /// `x * s` with one factor per row of `x`.
    pub fn mul_col(&self, x: Var, s: Var) -> Var {
        let (vx, vs) = (self.value(x), self.value(s));
        let c = vx.cols();
        assert_eq!(vs.len(), vx.rows(), "mul_col: {} factors for {} rows", vs.len(), vx.rows());
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * vs.data()[i / c])
            .collect();
        self.push(Op::MulCol(x, s), Tensor::new(vx.shape(), data))
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        let k = T::of(c);
        let out = self.value(x).map(|v| v * k);
        self.push(Op::Scale(x, c), out)
    }

    pub fn neg(&self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        let k = T::of(c);
        let out = self.value(x).map(|v| v + k);
        self.push(Op::AddScalar(x), out)
    }

    fn unary(&self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(x).map(f);
        self.push(op, out)
    }

    pub fn silu(&self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn ln(&self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Ln(x))
    }

    /// Elementwise `max(c, x)`; no gradient where the floor is active.
    pub fn clamp_min(&self, x: Var, c: f64) -> Var {
        let k = T::of(c);
        self.unary(x, |v| if v > k { v } else { k }, Op::ClampMin(x, c))
    }

    // ---- linear algebra -------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`, flattening leading dimensions of `a`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.rows(), va.cols());
        assert_eq!(vb.shape().len(), 2, "matmul: rhs must be 2-D");
        assert_eq!(vb.shape()[0], k, "matmul: inner dims {k} vs {}", vb.shape()[0]);
        let n = vb.shape()[1];
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, va.data(), false, vb.data(), false, &mut out, false);
        self.push(Op::MatMul(a, b), Tensor::new(&[m, n], out))
    }

    // ---- reductions and reshapes ------------------------------------------

    /// Softmax over consecutive groups of `group` values along the last axis.
    pub fn softmax(&self, x: Var, group: usize) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.len() % group, 0, "softmax: group {group} does not divide {}", vx.len());
        let mut out = vx.data().to_vec();
        for g in out.chunks_mut(group) {
            let m = g.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in g.iter_mut() {
                *v = (*v - m).exp();
                s = s + *v;
            }
            for v in g.iter_mut() {
                *v = *v / s;
            }
        }
        self.push(Op::Softmax(x, group), Tensor::new(vx.shape(), out))
    }

    pub fn log_softmax(&self, x: Var, group: usize) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.len() % group, 0, "log_softmax: group {group} does not divide {}", vx.len());
        let mut out = vx.data().to_vec();
        for g in out.chunks_mut(group) {
            let m = g.iter().cloned().fold(T::neg_infinity(), T::max);
            let lse = m + g.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            for v in g.iter_mut() {
                *v = *v - lse;
            }
        }
        self.push(Op::LogSoftmax(x, group), Tensor::new(vx.shape(), out))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let t = (*self.value(x)).clone().reshaped(shape);
        self.push(Op::Reshape(x), t)
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.value(x).data().iter().cloned().sum::<T>();
        self.push(Op::SumAll(x), Tensor::scalar(s))
    }

    pub fn mean(&self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.data().iter().cloned().sum::<T>() / T::of(vx.len() as f64);
        self.push(Op::MeanAll(x), Tensor::scalar(s))
    }

    /// Sum over the last axis: `[n, d] -> [n, 1]`.
    pub fn sum_cols(&self, x: Var) -> Var {
        let vx = self.value(x);
        let c = vx.cols();
        let data = vx.data().chunks(c).map(|r| r.iter().cloned().sum()).collect();
        self.push(Op::SumCols(x), Tensor::new(&[vx.rows(), 1], data))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let rows = vals[0].rows();
        let total: usize = vals.iter().map(|v| v.cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &vals {
                assert_eq!(v.rows(), rows, "concat_cols: row mismatch");
                out.extend_from_slice(v.row(r));
            }
        }
        self.push(Op::ConcatCols(parts.to_vec()), Tensor::new(&[rows, total], out))
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        assert!(start + len <= vx.cols(), "slice_cols out of range");
        let mut out = Vec::with_capacity(vx.rows() * len);
        for r in 0..vx.rows() {
            out.extend_from_slice(&vx.row(r)[start..start + len]);
        }
        self.push(Op::SliceCols(x, start), Tensor::new(&[vx.rows(), len], out))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let vals: Vec<Tensor<T>> = parts.iter().map(|&p| (*self.value(p)).clone()).collect();
        let t = Tensor::stack_rows(&vals);
        self.push(Op::ConcatRows(parts.to_vec()), t)
    }

    /// Rows `start..start+len` along the first axis.
    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        let per = vx.len() / vx.shape()[0];
        assert!(start + len <= vx.shape()[0], "slice_rows out of range");
        let mut shape = vx.shape().to_vec();
        shape[0] = len;
        let data = vx.data()[start * per..(start + len) * per].to_vec();
        self.push(Op::SliceRows(x, start), Tensor::new(&shape, data))
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&self, x: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let c = vx.cols();
        let e = T::of(eps);
        let n = T::of(c as f64);
        let mut out = vx.data().to_vec();
        for r in out.chunks_mut(c) {
            let mean = r.iter().cloned().sum::<T>() / n;
            let var = r.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + e).sqrt();
            for v in r.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        self.push(Op::LayerNorm(x, eps), Tensor::new(vx.shape(), out))
    }

    // ---- convolutions ------------------------------------------------------

    /// Strided convolution of NHWC images `x: [b, h, w, cin]` with
    /// `w: [k*k*cin, cout]`, giving `[b, oh, ow, cout]`.
    pub fn conv2d(&self, x: Var, w: Var, geom: ConvGeom) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let s = vx.shape();
        assert_eq!(s.len(), 4, "conv2d expects NHWC input");
        let f = Frame { h: s[1], w: s[2], c: s[3] };
        let plen = geom.patch_len(f.c);
        assert_eq!(vw.shape(), &[plen, vw.shape()[1]], "conv2d weight shape");
        let cout = vw.shape()[1];
        let (oh, ow) = (geom.out_size(f.h), geom.out_size(f.w));
        let b = s[0];
        let mut out = vec![T::zero(); b * oh * ow * cout];
        let mut cols = vec![T::zero(); CHUNK_FRAMES.min(b) * oh * ow * plen];
        for start in (0..b).step_by(CHUNK_FRAMES) {
            let nf = CHUNK_FRAMES.min(b - start);
            let rows = nf * oh * ow;
            im2col(&vx.data()[start * f.len()..], nf, f, geom, &mut cols);
            let o = &mut out[start * oh * ow * cout..(start + nf) * oh * ow * cout];
            T::gemm(rows, plen, cout, &cols, false, vw.data(), false, o, false);
        }
        self.push(Op::Conv(x, w, f, geom), Tensor::new(&[b, oh, ow, cout], out))
    }

    /// Transposed convolution (adjoint of [`Tape::conv2d`] in its input):
    /// `x: [b, h, w, cin]`, `w: [cin, k*k*cout]`, giving `[b, H, W, cout]`
    /// where `H = geom.in_size(h)`.
    pub fn conv_transpose2d(&self, x: Var, w: Var, cout: usize, geom: ConvGeom) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let s = vx.shape();
        assert_eq!(s.len(), 4, "conv_transpose2d expects NHWC input");
        let (b, h, wd, cin) = (s[0], s[1], s[2], s[3]);
        let f = Frame {
            h: geom.in_size(h),
            w: geom.in_size(wd),
            c: cout,
        };
        let plen = geom.patch_len(cout);
        assert_eq!(vw.shape(), &[cin, plen], "conv_transpose2d weight shape");
        let mut out = vec![T::zero(); b * f.len()];
        let mut cols = vec![T::zero(); CHUNK_FRAMES.min(b) * h * wd * plen];
        for start in (0..b).step_by(CHUNK_FRAMES) {
            let nf = CHUNK_FRAMES.min(b - start);
            let rows = nf * h * wd;
            let xin = &vx.data()[start * h * wd * cin..(start + nf) * h * wd * cin];
            T::gemm(rows, cin, plen, xin, false, vw.data(), false, &mut cols, false);
            col2im(&cols, nf, f, geom, &mut out[start * f.len()..(start + nf) * f.len()]);
        }
        self.push(Op::ConvT(x, w, f, geom), Tensor::new(&[b, f.h, f.w, cout], out))
    }

    // ---- fused losses ------------------------------------------------------

    /// Per-row sum of binary cross-entropy between `logits` and constant
    /// `target` probabilities, optionally weighted per element: `[n, d] -> [n, 1]`.
    pub fn bce_with_logits(&self, logits: Var, target: Rc<Tensor<T>>, weight: Option<Rc<Tensor<T>>>) -> Var {
        let vx = self.value(logits);
        assert_eq!(vx.len(), target.len(), "bce: target size mismatch");
        if let Some(w) = &weight {
            assert_eq!(vx.len(), w.len(), "bce: weight size mismatch");
        }
        let c = vx.cols();
        let mut out = Vec::with_capacity(vx.rows());
        for r in 0..vx.rows() {
            let mut s = T::zero();
            for j in r * c..(r + 1) * c {
                let x = vx.data()[j];
                let t = target.data()[j];
                let l = x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln();
                let wj = weight.as_ref().map_or(T::one(), |w| w.data()[j]);
                s = s + wj * l;
            }
            out.push(s);
        }
        self.push(Op::Bce(logits, target, weight), Tensor::new(&[vx.rows(), 1], out))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse-mode gradients of the scalar `loss` with respect to all leaves
    /// that require gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check_finite("forward")?;
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(&nodes, node, &g, &mut grads);
        }
        let mut out = Vec::with_capacity(nodes.len());
        for (i, g) in grads.into_iter().enumerate() {
            let keep = nodes[i].needs_grad && matches!(nodes[i].op, Op::Leaf);
            out.push(match (keep, g) {
                (true, Some(g)) => Some(Tensor::new(nodes[i].value.shape(), g)),
                (true, None) => Some(Tensor::zeros(nodes[i].value.shape())),
                _ => None,
            });
        }
        if out.iter().flatten().any(|g| !g.all_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        Ok(Gradients { grads: out })
    }

    fn backward_node(&self, nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| nodes[v.0].value.clone();
        let wants = |v: Var| nodes[v.0].needs_grad;
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if wants(v) {
                        add_scaled(acc(grads, v, g.len()), g, T::of(sign));
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if wants(v) {
                        add_scaled(acc(grads, v, g.len()), g, T::of(sign));
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if wants(*a) {
                    let ga = acc(grads, *a, g.len());
                    for ((d, &gi), &bi) in ga.iter_mut().zip(g).zip(vb.data()) {
                        *d = *d + gi * bi;
                    }
                }
                if wants(*b) {
                    let gb = acc(grads, *b, g.len());
                    for ((d, &gi), &ai) in gb.iter_mut().zip(g).zip(va.data()) {
                        *d = *d + gi * ai;
                    }
                }
            }
            Op::AddRow(x, b) => {
                let c = val(*b).len();
                if wants(*x) {
                    add_scaled(acc(grads, *x, g.len()), g, T::one());
                }
                if wants(*b) {
                    let gb = acc(grads, *b, c);
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % c] = gb[i % c] + gi;
                    }
                }
            }
            Op::MulRow(x, s) => {
                let (vx, vs) = (val(*x), val(*s));
                let c = vs.len();
                if wants(*x) {
                    let gx = acc(grads, *x, g.len());
                    for (i, &gi) in g.iter().enumerate() {
                        gx[i] = gx[i] + gi * vs.data()[i % c];
                    }
                }
                if wants(*s) {
                    let gs = acc(grads, *s, c);
                    for (i, &gi) in g.iter().enumerate() {
                        gs[i % c] = gs[i % c] + gi * vx.data()[i];
                    }
                }
            }
            Op::MulCol(x, s) => {
                let (vx, vs) = (val(*x), val(*s));
                let c = vx.cols();
                if wants(*x) {
                    let gx = acc(grads, *x, g.len());
                    for (i, &gi) in g.iter().enumerate() {
                        gx[i] = gx[i] + gi * vs.data()[i / c];
                    }
                }
                if wants(*s) {
                    let gs = acc(grads, *s, vs.len());
                    for (i, &gi) in g.iter().enumerate() {
                        gs[i / c] = gs[i / c] + gi * vx.data()[i];
                    }
                }
            }
            Op::Scale(x, c) => add_scaled(acc(grads, *x, g.len()), g, T::of(*c)),
            Op::AddScalar(x) | Op::Reshape(x) => add_scaled(acc(grads, *x, g.len()), g, T::one()),
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k) = (va.rows(), va.cols());
                let n = vb.shape()[1];
                if wants(*a) {
                    let ga = acc(grads, *a, m * k);
                    T::gemm(m, n, k, g, false, vb.data(), true, ga, true);
                }
                if wants(*b) {
                    let gb = acc(grads, *b, k * n);
                    T::gemm(k, m, n, va.data(), true, g, false, gb, true);
                }
            }
            Op::Silu(x) => {
                let vx = val(*x);
                let gx = acc(grads, *x, g.len());
                for ((d, &gi), &xi) in gx.iter_mut().zip(g).zip(vx.data()) {
                    let s = sigmoid(xi);
                    *d = *d + gi * s * (T::one() + xi * (T::one() - s));
                }
            }
            Op::Sigmoid(x) => {
                let gx = acc(grads, *x, g.len());
                for ((d, &gi), &yi) in gx.iter_mut().zip(g).zip(y.data()) {
                    *d = *d + gi * yi * (T::one() - yi);
                }
            }
            Op::Tanh(x) => {
                let gx = acc(grads, *x, g.len());
                for ((d, &gi), &yi) in gx.iter_mut().zip(g).zip(y.data()) {
                    *d = *d + gi * (T::one() - yi * yi);
                }
            }
            Op::Exp(x) => {
                let gx = acc(grads, *x, g.len());
                for ((d, &gi), &yi) in gx.iter_mut().zip(g).zip(y.data()) {
                    *d = *d + gi * yi;
                }
            }
            Op::Ln(x) => {
                let vx = val(*x);
                let gx = acc(grads, *x, g.len());
                for ((d, &gi), &xi) in gx.iter_mut().zip(g).zip(vx.data()) {
                    *d = *d + gi / xi;
                }
            }
            Op::ClampMin(x, c) => {
                let vx = val(*x);
                let k = T::of(*c);
                let gx = acc(grads, *x, g.len());
                for ((d, &gi), &xi) in gx.iter_mut().zip(g).zip(vx.data()) {
                    if xi > k {
                        *d = *d + gi;
                    }
                }
            }
            Op::Softmax(x, group) => {
                let gx = acc(grads, *x, g.len());
                for ((gxg, gg), yg) in gx.chunks_mut(*group).zip(g.chunks(*group)).zip(y.data().chunks(*group)) {
                    let dot: T = gg.iter().zip(yg).map(|(&a, &b)| a * b).sum();
                    for ((d, &gi), &yi) in gxg.iter_mut().zip(gg).zip(yg) {
                        *d = *d + yi * (gi - dot);
                    }
                }
            }
            Op::LogSoftmax(x, group) => {
                let gx = acc(grads, *x, g.len());
                for ((gxg, gg), yg) in gx.chunks_mut(*group).zip(g.chunks(*group)).zip(y.data().chunks(*group)) {
                    let total: T = gg.iter().cloned().sum();
                    for ((d, &gi), &yi) in gxg.iter_mut().zip(gg).zip(yg) {
                        *d = *d + gi - yi.exp() * total;
                    }
                }
            }
            Op::SumAll(x) => {
                let n = val(*x).len();
                let gx = acc(grads, *x, n);
                for d in gx.iter_mut() {
                    *d = *d + g[0];
                }
            }
            Op::MeanAll(x) => {
                let n = val(*x).len();
                let k = g[0] / T::of(n as f64);
                let gx = acc(grads, *x, n);
                for d in gx.iter_mut() {
                    *d = *d + k;
                }
            }
            Op::SumCols(x) => {
                let vx = val(*x);
                let c = vx.cols();
                let gx = acc(grads, *x, vx.len());
                for (i, d) in gx.iter_mut().enumerate() {
                    *d = *d + g[i / c];
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut offset = 0;
                for &p in parts {
                    let vp = val(p);
                    let c = vp.cols();
                    if wants(p) {
                        let gp = acc(grads, p, vp.len());
                        for r in 0..vp.rows() {
                            let src = &g[r * total + offset..r * total + offset + c];
                            add_scaled(&mut gp[r * c..(r + 1) * c], src, T::one());
                        }
                    }
                    offset += c;
                }
            }
            Op::SliceCols(x, start) => {
                let vx = val(*x);
                let (c, len) = (vx.cols(), y.cols());
                let gx = acc(grads, *x, vx.len());
                for r in 0..vx.rows() {
                    add_scaled(&mut gx[r * c + start..r * c + start + len], &g[r * len..(r + 1) * len], T::one());
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    if wants(p) {
                        add_scaled(acc(grads, p, n), &g[offset..offset + n], T::one());
                    }
                    offset += n;
                }
            }
            Op::SliceRows(x, start) => {
                let vx = val(*x);
                let per = vx.len() / vx.shape()[0];
                let gx = acc(grads, *x, vx.len());
                add_scaled(&mut gx[start * per..start * per + g.len()], g, T::one());
            }
            Op::LayerNorm(x, eps) => {
                let vx = val(*x);
                let c = vx.cols();
                let n = T::of(c as f64);
                let e = T::of(*eps);
                let gx = acc(grads, *x, vx.len());
                for ((xr, gr), (yr, dr)) in vx
                    .data()
                    .chunks(c)
                    .zip(g.chunks(c))
                    .zip(y.data().chunks(c).zip(gx.chunks_mut(c)))
                {
                    let mean = xr.iter().cloned().sum::<T>() / n;
                    let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                    let inv = T::one() / (var + e).sqrt();
                    let mg = gr.iter().cloned().sum::<T>() / n;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for ((d, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = *d + inv * (gi - mg - yi * mgy);
                    }
                }
            }
            Op::Conv(x, w, f, geom) => {
                let (vx, vw) = (val(*x), val(*w));
                let cout = vw.shape()[1];
                let plen = geom.patch_len(f.c);
                let (oh, ow) = (geom.out_size(f.h), geom.out_size(f.w));
                let b = vx.shape()[0];
                let mut cols = vec![T::zero(); CHUNK_FRAMES.min(b) * oh * ow * plen];
                let mut gw = wants(*w).then(|| vec![T::zero(); plen * cout]);
                let mut gx = wants(*x).then(|| vec![T::zero(); vx.len()]);
                for start in (0..b).step_by(CHUNK_FRAMES) {
                    let nf = CHUNK_FRAMES.min(b - start);
                    let rows = nf * oh * ow;
                    let go = &g[start * oh * ow * cout..(start + nf) * oh * ow * cout];
                    if let Some(gw) = gw.as_mut() {
                        im2col(&vx.data()[start * f.len()..], nf, *f, *geom, &mut cols);
                        T::gemm(plen, rows, cout, &cols, true, go, false, gw, true);
                    }
                    if let Some(gx) = gx.as_mut() {
                        T::gemm(rows, cout, plen, go, false, vw.data(), true, &mut cols, false);
                        col2im(&cols, nf, *f, *geom, &mut gx[start * f.len()..(start + nf) * f.len()]);
                    }
                }
                if let Some(gw) = gw {
                    add_scaled(acc(grads, *w, gw.len()), &gw, T::one());
                }
                if let Some(gx) = gx {
                    add_scaled(acc(grads, *x, gx.len()), &gx, T::one());
                }
            }
            Op::ConvT(x, w, f, geom) => {
                let (vx, vw) = (val(*x), val(*w));
                let s = vx.shape();
                let (b, h, wd, cin) = (s[0], s[1], s[2], s[3]);
                let plen = geom.patch_len(f.c);
                let mut cols = vec![T::zero(); CHUNK_FRAMES.min(b) * h * wd * plen];
                let mut gw = wants(*w).then(|| vec![T::zero(); cin * plen]);
                let mut gx = wants(*x).then(|| vec![T::zero(); vx.len()]);
                for start in (0..b).step_by(CHUNK_FRAMES) {
                    let nf = CHUNK_FRAMES.min(b - start);
                    let rows = nf * h * wd;
                    im2col(&g[start * f.len()..], nf, *f, *geom, &mut cols);
                    let xin = &vx.data()[start * h * wd * cin..(start + nf) * h * wd * cin];
                    if let Some(gw) = gw.as_mut() {
                        T::gemm(cin, rows, plen, xin, true, &cols, false, gw, true);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let dst = &mut gx[start * h * wd * cin..(start + nf) * h * wd * cin];
                        T::gemm(rows, plen, cin, &cols, false, vw.data(), true, dst, true);
                    }
                }
                if let Some(gw) = gw {
                    add_scaled(acc(grads, *w, gw.len()), &gw, T::one());
                }
                if let Some(gx) = gx {
                    add_scaled(acc(grads, *x, gx.len()), &gx, T::one());
                }
            }
            Op::Bce(x, target, weight) => {
                let vx = val(*x);
                let c = vx.cols();
                let gx = acc(grads, *x, vx.len());
                for (j, d) in gx.iter_mut().enumerate() {
                    let wj = weight.as_ref().map_or(T::one(), |w| w.data()[j]);
                    *d = *d + g[j / c] * wj * (sigmoid(vx.data()[j]) - target.data()[j]);
                }
            }
        }
    }
}

fn add_scaled<T: Real>(dst: &mut [T], src: &[T], k: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + k * s;
    }
}
