//! Single-threaded reverse-mode tape.
//!
//! Every operation appends a node holding its value; [`Graph::backward`]
//! walks the tape once in reverse and returns gradients for every parameter
//! reachable from the loss.

use std::sync::Arc;

use super::attention::{self, AttentionMask, AttnDims};
use super::real::{gemm, Real, View, ViewMut};
use super::{Array, ParamId, ParamStore};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-position rotation angles for interleaved rotary encoding.
///
/// Row `p` holds `cos`/`sin` of the `pairs` angles applied at sequence
/// position `p`; each head segment of width `2·pairs` is rotated pairwise.
#[derive(Clone, Debug, PartialEq)]
pub struct RotaryTable<T = f32> {
    pub seq_len: usize,
    pub pairs: usize,
    pub cos: Vec<T>,
    pub sin: Vec<T>,
}

enum Op<T: Real> {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Silu(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    RmsNorm { x: Var, w: Var, inv_rms: Vec<T> },
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    ConcatRows(Var, Var),
    GatherRows { x: Var, index: Vec<usize> },
    InterleaveSeq { a: Var, b: Var, batch: usize },
    Rotary { x: Var, table: Arc<RotaryTable<T>> },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        mask: Arc<AttentionMask>,
        dims: AttnDims,
        scale: T,
        probs: Vec<T>,
    },
}

struct Node<T: Real> {
    value: Array<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients keyed by parameter.
#[derive(Clone, Debug)]
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Array<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Array<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array<T>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Graph { nodes: Vec::new() }
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(shape_err(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

const GELU_K: f64 = 0.044_715;

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(GELU_K);
    let half = T::of(0.5);
    let th = (c * (x + k * x * x * x)).tanh();
    let y = half * x * (T::one() + th);
    let dy = half * (T::one() + th)
        + half * x * (T::one() - th * th) * c * (T::one() + T::of(3.0) * k * x * x);
    (y, dy)
}

/// `x / sqrt(mean(x²) + eps) ⊙ weight` along the last axis.
pub fn rms_norm<T: Real>(x: &Array<T>, weight: &Array<T>, eps: T) -> Result<Array<T>> {
    let (y, _) = rms_norm_impl(x, weight, eps)?;
    Ok(y)
}

fn rms_norm_impl<T: Real>(x: &Array<T>, w: &Array<T>, eps: T) -> Result<(Array<T>, Vec<T>)> {
    let c = x.cols();
    if w.len() != c {
        return Err(shape_err("rms_norm", format!("weight {} vs last extent {c}", w.len())));
    }
    let n = T::of(c as f64);
    let mut out = Vec::with_capacity(x.len());
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let ms = row.iter().map(|&v| v * v).sum::<T>() / n;
        let s = if ms + eps > T::zero() { T::one() / (ms + eps).sqrt() } else { T::zero() };
        inv.push(s);
        out.extend(row.iter().zip(w.data()).map(|(&v, &g)| v * s * g));
    }
    Ok((Array::new(x.shape().to_vec(), out)?, inv))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op_name: &'static str, value: Array<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Array<T>) -> Result<Var> {
        self.push("constant", value, Op::Constant, false)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        self.push("param", store.get(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let g = self.ng(a) || self.ng(b);
        self.push("matmul", out, Op::MatMul(a, b), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let g = self.ng(a) || self.ng(b);
        self.push("add", out, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let g = self.ng(a) || self.ng(b);
        self.push("sub", out, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let g = self.ng(a) || self.ng(b);
        self.push("mul", out, Op::Mul(a, b), g)
    }

    /// Adds a bias vector to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let c = xv.cols();
        if bv.len() != c {
            return Err(shape_err("add_row", format!("bias {} vs cols {c}", bv.len())));
        }
        let data = xv
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(bv.data()).map(|(&a, &b)| a + b))
            .collect();
        let out = Array::new(xv.shape().to_vec(), data)?;
        let g = self.ng(x) || self.ng(bias);
        self.push("add_row", out, Op::AddRow(x, bias), g)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        let g = self.ng(x);
        self.push("scale", out, Op::Scale(x, s), g)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        let out = self.value(x).map(|v| v + s);
        let g = self.ng(x);
        self.push("add_scalar", out, Op::AddScalar(x), g)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * sigmoid(v));
        let g = self.ng(x);
        self.push("silu", out, Op::Silu(x), g)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| gelu_parts(v).0);
        let g = self.ng(x);
        self.push("gelu", out, Op::Gelu(x), g)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        let g = self.ng(x);
        self.push("sum", Array::scalar(s), Op::Sum(x), g)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.data().iter().copied().sum::<T>() / T::of(xv.len() as f64);
        let g = self.ng(x);
        self.push("mean", Array::scalar(s), Op::Mean(x), g)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        same_shape("mse", av.shape(), bv.shape())?;
        let s = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            / T::of(av.len() as f64);
        let g = self.ng(a) || self.ng(b);
        self.push("mse", Array::scalar(s), Op::Mse(a, b), g)
    }

    pub fn rms_norm(&mut self, x: Var, w: Var, eps: T) -> Result<Var> {
        let (out, inv_rms) = rms_norm_impl(self.value(x), self.value(w), eps)?;
        let g = self.ng(x) || self.ng(w);
        self.push("rms_norm", out, Op::RmsNorm { x, w, inv_rms }, g)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let g = self.ng(x);
        self.push("reshape", out, Op::Reshape(x), g)
    }

    /// Columns `[start, start + width)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if width == 0 || start + width > c {
            return Err(shape_err("slice_cols", format!("{start}+{width} of {c}")));
        }
        let data = xv
            .data()
            .chunks(c)
            .flat_map(|row| row[start..start + width].iter().copied())
            .collect();
        let out = Array::new(vec![xv.rows(), width], data)?;
        let g = self.ng(x);
        self.push("slice_cols", out, Op::SliceCols { x, start }, g)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = Array::concat_rows(&[self.value(a), self.value(b)])?;
        let g = self.ng(a) || self.ng(b);
        self.push("concat_rows", out, Op::ConcatRows(a, b), g)
    }

    /// `out[r] = x[index[r]]`.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if index.is_empty() {
            return Err(shape_err("gather_rows", "empty index"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.rows()) {
            return Err(shape_err("gather_rows", format!("row {bad} of {}", xv.rows())));
        }
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in &index {
            data.extend_from_slice(xv.row(i));
        }
        let out = Array::new(vec![index.len(), c], data)?;
        let g = self.ng(x);
        self.push("gather_rows", out, Op::GatherRows { x, index }, g)
    }

    /// Per batch element, rows of `a` followed by rows of `b`.
    pub fn interleave_seq(&mut self, a: Var, b: Var, batch: usize) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let c = av.cols();
        if bv.cols() != c || batch == 0 || !av.rows().is_multiple_of(batch) || !bv.rows().is_multiple_of(batch) {
            return Err(shape_err(
                "interleave_seq",
                format!("{:?} and {:?} over batch {batch}", av.shape(), bv.shape()),
            ));
        }
        let (la, lb) = (av.rows() / batch, bv.rows() / batch);
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for e in 0..batch {
            data.extend_from_slice(&av.data()[e * la * c..(e + 1) * la * c]);
            data.extend_from_slice(&bv.data()[e * lb * c..(e + 1) * lb * c]);
        }
        let out = Array::new(vec![batch * (la + lb), c], data)?;
        let g = self.ng(a) || self.ng(b);
        self.push("interleave_seq", out, Op::InterleaveSeq { a, b, batch }, g)
    }

    /// Rotates interleaved pairs of every head segment by the table's angles.
    pub fn rotary(&mut self, x: Var, table: Arc<RotaryTable<T>>) -> Result<Var> {
        let xv = self.value(x);
        let seg = 2 * table.pairs;
        if seg == 0 || !xv.cols().is_multiple_of(seg) || !xv.rows().is_multiple_of(table.seq_len) {
            return Err(shape_err(
                "rotary",
                format!("{:?} vs table {}x{}", xv.shape(), table.seq_len, table.pairs),
            ));
        }
        let out = rotate(xv, &table, false);
        let g = self.ng(x);
        self.push("rotary", out, Op::Rotary { x, table }, g)
    }

    /// Multi-head masked softmax attention; see
    /// [`masked_softmax_attention`](super::masked_softmax_attention).
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Arc<AttentionMask>,
        heads: usize,
        scale: T,
    ) -> Result<Var> {
        let dims = AttnDims::infer(self.shape(q), self.shape(k), self.shape(v), &mask, heads)?;
        let (out, probs) = attention::forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            dims,
            &mask,
            scale,
        );
        let out = Array::new(self.shape(q).to_vec(), out)?;
        let g = self.ng(q) || self.ng(k) || self.ng(v);
        let op = Op::Attention { q, k, v, mask, dims, scale, probs };
        self.push("attention", out, op, g)
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let n_params = self
            .nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Param(id) => Some(id.0 + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0);
        let mut params: Vec<Option<Array<T>>> = vec![None; n_params];
        let mut grads: Vec<Option<Array<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Array::full(lv.shape().to_vec(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, g, &mut grads, &mut params)?;
        }
        for g in params.iter().flatten() {
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        Ok(Gradients { grads: params })
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: Array<T>,
        grads: &mut [Option<Array<T>>],
        params: &mut [Option<Array<T>>],
    ) -> Result<()> {
        let mut acc = |v: Var, d: Array<T>| {
            if !self.ng(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.data_mut().iter_mut().zip(d.data()) {
                        *e = *e + *x;
                    }
                }
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => match &mut params[id.0] {
                Some(existing) => {
                    for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                        *e = *e + *x;
                    }
                }
                slot @ None => *slot = Some(g),
            },
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.ng(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(
                        T::one(),
                        View::dense(g.data(), 0, m, n),
                        View::dense(bv.data(), 0, k, n).t(),
                        T::zero(),
                        ViewMut::dense(&mut da, 0, m, k),
                    );
                    acc(*a, Array::new(vec![m, k], da)?);
                }
                if self.ng(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(
                        T::one(),
                        View::dense(av.data(), 0, m, k).t(),
                        View::dense(g.data(), 0, m, n),
                        T::zero(),
                        ViewMut::dense(&mut db, 0, k, n),
                    );
                    acc(*b, Array::new(vec![k, n], db)?);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g);
            }
            Op::Sub(a, b) => {
                acc(*b, g.map(|x| -x));
                acc(*a, g);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.ng(*a) {
                    acc(*a, g.zip_map(bv, |d, y| d * y)?);
                }
                if self.ng(*b) {
                    acc(*b, g.zip_map(av, |d, x| d * x)?);
                }
            }
            Op::AddRow(x, bias) => {
                if self.ng(*bias) {
                    let c = g.cols();
                    let mut db = vec![T::zero(); c];
                    for row in g.data().chunks(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    acc(*bias, Array::new(self.shape(*bias).to_vec(), db)?);
                }
                acc(*x, g);
            }
            Op::Scale(x, s) => acc(*x, g.map(|d| d * *s)),
            Op::AddScalar(x) | Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                acc(*x, g.reshape(shape)?);
            }
            Op::Silu(x) => {
                let d = g.zip_map(self.value(*x), |d, v| {
                    let s = sigmoid(v);
                    d * s * (T::one() + v * (T::one() - s))
                })?;
                acc(*x, d);
            }
            Op::Gelu(x) => {
                let d = g.zip_map(self.value(*x), |d, v| d * gelu_parts(v).1)?;
                acc(*x, d);
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                acc(*x, Array::full(self.shape(*x).to_vec(), s));
            }
            Op::Mean(x) => {
                let n = T::of(self.value(*x).len() as f64);
                acc(*x, Array::full(self.shape(*x).to_vec(), g.data()[0] / n));
            }
            Op::Mse(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let k = T::of(2.0) * g.data()[0] / T::of(av.len() as f64);
                let da = av.zip_map(bv, |x, y| k * (x - y))?;
                if self.ng(*b) {
                    acc(*b, da.map(|v| -v));
                }
                acc(*a, da);
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let c = xv.cols();
                let n = T::of(c as f64);
                if self.ng(*w) {
                    let mut dw = vec![T::zero(); c];
                    for (r, &s) in inv_rms.iter().enumerate() {
                        let xr = xv.row(r);
                        let gr = g.row(r);
                        for j in 0..c {
                            dw[j] = dw[j] + gr[j] * xr[j] * s;
                        }
                    }
                    acc(*w, Array::new(wv.shape().to_vec(), dw)?);
                }
                if self.ng(*x) {
                    let mut dx = Vec::with_capacity(xv.len());
                    for (r, &s) in inv_rms.iter().enumerate() {
                        let xr = xv.row(r);
                        let gr = g.row(r);
                        let dot: T = (0..c).map(|j| gr[j] * wv.data()[j] * xr[j]).sum();
                        let k = s * s * dot / n;
                        dx.extend((0..c).map(|j| s * (gr[j] * wv.data()[j] - xr[j] * k)));
                    }
                    acc(*x, Array::new(xv.shape().to_vec(), dx)?);
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let wdt = g.cols();
                let mut dx = vec![T::zero(); xv.len()];
                for (r, row) in g.data().chunks(wdt).enumerate() {
                    dx[r * c + start..r * c + start + wdt].copy_from_slice(row);
                }
                acc(*x, Array::new(xv.shape().to_vec(), dx)?);
            }
            Op::ConcatRows(a, b) => {
                let ra = self.value(*a).rows();
                let c = g.cols();
                let (ga, gb) = g.data().split_at(ra * c);
                acc(*a, Array::new(self.shape(*a).to_vec(), ga.to_vec())?);
                acc(*b, Array::new(self.shape(*b).to_vec(), gb.to_vec())?);
            }
            Op::GatherRows { x, index } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![T::zero(); xv.len()];
                for (r, &src) in index.iter().enumerate() {
                    for (d, &v) in dx[src * c..(src + 1) * c].iter_mut().zip(g.row(r)) {
                        *d = *d + v;
                    }
                }
                acc(*x, Array::new(xv.shape().to_vec(), dx)?);
            }
            Op::InterleaveSeq { a, b, batch } => {
                let c = g.cols();
                let la = self.value(*a).rows() / batch;
                let lb = self.value(*b).rows() / batch;
                let mut da = Vec::with_capacity(la * batch * c);
                let mut db = Vec::with_capacity(lb * batch * c);
                for e in 0..*batch {
                    let base = e * (la + lb) * c;
                    da.extend_from_slice(&g.data()[base..base + la * c]);
                    db.extend_from_slice(&g.data()[base + la * c..base + (la + lb) * c]);
                }
                acc(*a, Array::new(self.shape(*a).to_vec(), da)?);
                acc(*b, Array::new(self.shape(*b).to_vec(), db)?);
            }
            Op::Rotary { x, table } => acc(*x, rotate(&g, table, true)),
            Op::Attention { q, k, v, mask, dims, scale, probs } => {
                let (dq, dk, dv) = attention::backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    g.data(),
                    *dims,
                    mask,
                    *scale,
                );
                acc(*q, Array::new(self.shape(*q).to_vec(), dq)?);
                acc(*k, Array::new(self.shape(*k).to_vec(), dk)?);
                acc(*v, Array::new(self.shape(*v).to_vec(), dv)?);
            }
        }
        Ok(())
    }
}

fn rotate<T: Real>(x: &Array<T>, table: &RotaryTable<T>, inverse: bool) -> Array<T> {
    let c = x.cols();
    let seg = 2 * table.pairs;
    let mut out = x.data().to_vec();
    for r in 0..x.rows() {
        let p = r % table.seq_len;
        let cos = &table.cos[p * table.pairs..(p + 1) * table.pairs];
        let sin = &table.sin[p * table.pairs..(p + 1) * table.pairs];
        let row = &mut out[r * c..(r + 1) * c];
        for head in row.chunks_mut(seg) {
            for (i, pair) in head.chunks_mut(2).enumerate() {
                let (a, b) = (pair[0], pair[1]);
                let s = if inverse { -sin[i] } else { sin[i] };
                pair[0] = a * cos[i] - b * s;
                pair[1] = a * s + b * cos[i];
            }
        }
    }
    Array::new(x.shape().to_vec(), out).expect("same shape")
}
