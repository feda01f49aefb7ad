//! Masked multi-head softmax attention over block-structured masks.
//!
//! Query rows sharing an identical set of permitted key ranges are grouped, so
//! every score tile is a strided GEMM over contiguous keys. Masked pairs are
//! never evaluated, which makes their contribution exactly zero.

use super::real::{gemm, Real, View, ViewMut};
use super::Array;
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
struct RowGroup {
    start: usize,
    end: usize,
    runs: Vec<(usize, usize)>,
    width: usize,
    /// Offset of this group's score tile inside one (batch, head) slab.
    offset: usize,
}

/// Boolean query×key permission matrix with precomputed key runs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    lq: usize,
    lk: usize,
    allowed: Vec<bool>,
    groups: Vec<RowGroup>,
    permitted: usize,
}

impl AttentionMask {
    pub fn from_dense(lq: usize, lk: usize, allowed: Vec<bool>) -> Result<Self> {
        if lq == 0 || lk == 0 || allowed.len() != lq * lk {
            return Err(shape_err(
                "attention_mask",
                format!("{lq}x{lk} mask with {} entries", allowed.len()),
            ));
        }
        let mut groups: Vec<RowGroup> = Vec::new();
        let mut offset = 0;
        for r in 0..lq {
            let row = &allowed[r * lk..(r + 1) * lk];
            let mut runs = Vec::new();
            let mut j = 0;
            while j < lk {
                if row[j] {
                    let s = j;
                    while j < lk && row[j] {
                        j += 1;
                    }
                    runs.push((s, j));
                } else {
                    j += 1;
                }
            }
            if runs.is_empty() {
                return Err(Error::EmptyMaskRow { row: r });
            }
            match groups.last_mut() {
                Some(g) if g.runs == runs => {
                    g.end += 1;
                    offset += g.width;
                }
                _ => {
                    let width = runs.iter().map(|(s, e)| e - s).sum();
                    groups.push(RowGroup { start: r, end: r + 1, runs, width, offset });
                    offset += width;
                }
            }
        }
        Ok(AttentionMask { lq, lk, allowed, groups, permitted: offset })
    }

    pub fn full(lq: usize, lk: usize) -> Result<Self> {
        Self::from_dense(lq, lk, vec![true; lq * lk])
    }

    pub fn query_len(&self) -> usize {
        self.lq
    }

    pub fn key_len(&self) -> usize {
        self.lk
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.lk + k]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    /// Number of permitted (query, key) pairs.
    pub fn permitted(&self) -> usize {
        self.permitted
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnDims {
    pub batch: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttnDims {
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn infer(
        q_shape: &[usize],
        k_shape: &[usize],
        v_shape: &[usize],
        mask: &AttentionMask,
        heads: usize,
    ) -> Result<Self> {
        let err = |d: String| shape_err("masked_softmax_attention", d);
        if q_shape.len() != 2 || k_shape.len() != 2 || v_shape.len() != 2 {
            return Err(err("q, k, v must be rank 2".into()));
        }
        let width = q_shape[1];
        if heads == 0 || !width.is_multiple_of(heads) || k_shape[1] != width || v_shape[1] != width {
            return Err(err(format!(
                "widths q={} k={} v={} heads={heads}",
                q_shape[1], k_shape[1], v_shape[1]
            )));
        }
        if !q_shape[0].is_multiple_of(mask.lq) {
            return Err(err(format!("{} query rows vs mask rows {}", q_shape[0], mask.lq)));
        }
        let batch = q_shape[0] / mask.lq;
        if k_shape[0] != batch * mask.lk || v_shape[0] != batch * mask.lk {
            return Err(err(format!(
                "{} key rows, expected {} x {}",
                k_shape[0], batch, mask.lk
            )));
        }
        Ok(AttnDims { batch, heads, head_dim: width / heads })
    }
}

/// Returns the attention output and the per-tile probabilities needed for backward.
pub(crate) fn forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    dims: AttnDims,
    mask: &AttentionMask,
    scale: T,
) -> (Vec<T>, Vec<T>) {
    let w = dims.width();
    let hd = dims.head_dim;
    let slab = mask.permitted;
    let mut out = vec![T::zero(); dims.batch * mask.lq * w];
    let mut probs = vec![T::zero(); dims.batch * dims.heads * slab];
    for b in 0..dims.batch {
        for h in 0..dims.heads {
            let base = (b * dims.heads + h) * slab;
            for g in &mask.groups {
                let gm = g.end - g.start;
                let q_off = (b * mask.lq + g.start) * w + h * hd;
                let qv = View { data: q, offset: q_off, rows: gm, cols: hd, rs: w, cs: 1 };
                let mut co = 0;
                for &(k0, k1) in &g.runs {
                    let len = k1 - k0;
                    let kt = View {
                        data: k,
                        offset: (b * mask.lk + k0) * w + h * hd,
                        rows: len,
                        cols: hd,
                        rs: w,
                        cs: 1,
                    }
                    .t();
                    let s = ViewMut {
                        data: &mut probs,
                        offset: base + g.offset + co,
                        rows: gm,
                        cols: len,
                        rs: g.width,
                        cs: 1,
                    };
                    gemm(scale, qv, kt, T::zero(), s);
                    co += len;
                }
                for r in 0..gm {
                    let row = &mut probs[base + g.offset + r * g.width..][..g.width];
                    softmax_in_place(row);
                }
                let mut co = 0;
                for (ri, &(k0, k1)) in g.runs.iter().enumerate() {
                    let len = k1 - k0;
                    let p = View {
                        data: &probs,
                        offset: base + g.offset + co,
                        rows: gm,
                        cols: len,
                        rs: g.width,
                        cs: 1,
                    };
                    let vv = View {
                        data: v,
                        offset: (b * mask.lk + k0) * w + h * hd,
                        rows: len,
                        cols: hd,
                        rs: w,
                        cs: 1,
                    };
                    let o = ViewMut { data: &mut out, offset: q_off, rows: gm, cols: hd, rs: w, cs: 1 };
                    let beta = if ri == 0 { T::zero() } else { T::one() };
                    gemm(T::one(), p, vv, beta, o);
                    co += len;
                }
            }
        }
    }
    (out, probs)
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    let inv = T::one() / sum;
    for x in row.iter_mut() {
        *x = *x * inv;
    }
}

/// Gradients with respect to q, k and v.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    dims: AttnDims,
    mask: &AttentionMask,
    scale: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let w = dims.width();
    let hd = dims.head_dim;
    let slab = mask.permitted;
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let max_tile = mask.groups.iter().map(|g| (g.end - g.start) * g.width).max().unwrap_or(0);
    let mut ds = vec![T::zero(); max_tile];
    for b in 0..dims.batch {
        for h in 0..dims.heads {
            let base = (b * dims.heads + h) * slab;
            for g in &mask.groups {
                let gm = g.end - g.start;
                let q_off = (b * mask.lq + g.start) * w + h * hd;
                let dov = View { data: dout, offset: q_off, rows: gm, cols: hd, rs: w, cs: 1 };
                let p_tile = &probs[base + g.offset..base + g.offset + gm * g.width];
                // dP = dO · Vᵀ, dV += Pᵀ · dO
                let mut co = 0;
                for &(k0, k1) in &g.runs {
                    let len = k1 - k0;
                    let kv_off = (b * mask.lk + k0) * w + h * hd;
                    let vt = View { data: v, offset: kv_off, rows: len, cols: hd, rs: w, cs: 1 }.t();
                    let dp = ViewMut { data: &mut ds, offset: co, rows: gm, cols: len, rs: g.width, cs: 1 };
                    gemm(T::one(), dov, vt, T::zero(), dp);
                    let pt = View { data: p_tile, offset: co, rows: gm, cols: len, rs: g.width, cs: 1 }.t();
                    let dvv = ViewMut { data: &mut dv, offset: kv_off, rows: len, cols: hd, rs: w, cs: 1 };
                    gemm(T::one(), pt, dov, T::one(), dvv);
                    co += len;
                }
                // dS = P ⊙ (dP − rowsum(dP ⊙ P))
                for r in 0..gm {
                    let prow = &p_tile[r * g.width..(r + 1) * g.width];
                    let drow = &mut ds[r * g.width..(r + 1) * g.width];
                    let dot: T = prow.iter().zip(drow.iter()).map(|(&p, &d)| p * d).sum();
                    for (d, &p) in drow.iter_mut().zip(prow) {
                        *d = p * (*d - dot);
                    }
                }
                let qv = View { data: q, offset: q_off, rows: gm, cols: hd, rs: w, cs: 1 };
                let mut co = 0;
                for &(k0, k1) in &g.runs {
                    let len = k1 - k0;
                    let kv_off = (b * mask.lk + k0) * w + h * hd;
                    let dsv = View { data: &ds, offset: co, rows: gm, cols: len, rs: g.width, cs: 1 };
                    let kk = View { data: k, offset: kv_off, rows: len, cols: hd, rs: w, cs: 1 };
                    let dqv = ViewMut { data: &mut dq, offset: q_off, rows: gm, cols: hd, rs: w, cs: 1 };
                    gemm(scale, dsv, kk, T::one(), dqv);
                    let dkv = ViewMut { data: &mut dk, offset: kv_off, rows: len, cols: hd, rs: w, cs: 1 };
                    gemm(scale, dsv.t(), qv, T::one(), dkv);
                    co += len;
                }
            }
        }
    }
    (dq, dk, dv)
}

/// `softmax(scale·q·kᵀ + log mask)·v` per head, with heads laid out as
/// contiguous column segments of width `q.cols() / heads`.
///
/// Rows of `q` are `batch × mask.query_len()` tokens; rows of `k` and `v` are
/// `batch × mask.key_len()`.
pub fn masked_softmax_attention<T: Real>(
    q: &Array<T>,
    k: &Array<T>,
    v: &Array<T>,
    mask: &AttentionMask,
    heads: usize,
    scale: T,
) -> Result<Array<T>> {
    let dims = AttnDims::infer(q.shape(), k.shape(), v.shape(), mask, heads)?;
    let (out, _) = forward(q.data(), k.data(), v.data(), dims, mask, scale);
    let out = Array::new(q.shape().to_vec(), out)?;
    if !out.is_finite() {
        return Err(Error::NonFinite { op: "masked_softmax_attention" });
    }
    Ok(out)
}
