//! Rotary positional encoding over D position dimensions.
//!
//! The head dimension is split into D even segments; segment `j` is an
//! ordinary rotary encoding of coordinate `m_j` with its own base `b_j`.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Array, Graph, Real, RotaryTable};

/// `100·⌈8·L/(100π)⌉`: the longest wavelength is about eight times `L`.
pub fn derive_base(max_position: usize) -> f64 {
    100.0 * (8.0 * max_position.max(1) as f64 / (100.0 * PI)).ceil()
}

/// Splits `head_dim` into `dims` even parts, as equal as possible, with
/// the leftover pairs assigned to the leading dimensions.
pub fn split_head_dim(head_dim: usize, dims: usize) -> Result<Vec<usize>> {
    if dims == 0 || !head_dim.is_multiple_of(2) || head_dim < 2 * dims {
        return Err(Error::Invalid(format!(
            "head dim {head_dim} cannot be split into {dims} nonempty even segments"
        )));
    }
    let pairs = head_dim / 2;
    let base = pairs / dims;
    let extra = pairs % dims;
    Ok((0..dims).map(|j| 2 * (base + usize::from(j < extra))).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RopeNdConfig {
    pub segment_dims: Vec<usize>,
    pub bases: Vec<f64>,
    pub max_positions: Vec<usize>,
}

impl RopeNdConfig {
    /// Even split of `head_dim` with bases derived from the grid extents.
    pub fn auto(head_dim: usize, max_positions: &[usize]) -> Result<Self> {
        let segment_dims = split_head_dim(head_dim, max_positions.len())?;
        let bases = max_positions.iter().map(|&l| derive_base(l)).collect();
        Ok(RopeNdConfig { segment_dims, bases, max_positions: max_positions.to_vec() })
    }

    pub fn dims(&self) -> usize {
        self.segment_dims.len()
    }

    pub fn head_dim(&self) -> usize {
        self.segment_dims.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims();
        if d == 0 || self.bases.len() != d || self.max_positions.len() != d {
            return Err(Error::Invalid("rope segment, base and extent counts differ".into()));
        }
        if self.segment_dims.iter().any(|&s| s == 0 || s % 2 != 0) {
            return Err(Error::Invalid(format!("odd rope segment in {:?}", self.segment_dims)));
        }
        if self.bases.iter().any(|&b| !(b > 1.0 && b.is_finite())) {
            return Err(Error::Invalid(format!("rope bases {:?} must exceed 1", self.bases)));
        }
        Ok(())
    }

    /// Per-position cos/sin table for the given token coordinates.
    pub fn table<T: Real>(&self, positions: &[Vec<usize>]) -> Result<RotaryTable<T>> {
        self.validate()?;
        let pairs = self.head_dim() / 2;
        let mut cos = Vec::with_capacity(positions.len() * pairs);
        let mut sin = Vec::with_capacity(positions.len() * pairs);
        for pos in positions {
            if pos.len() != self.dims() {
                return Err(shape_err("rope", format!("position {pos:?} has wrong rank")));
            }
            for (j, (&m, &limit)) in pos.iter().zip(&self.max_positions).enumerate() {
                if m >= limit {
                    return Err(shape_err("rope", format!("position {m} >= extent {limit} in dim {j}")));
                }
                let d = self.segment_dims[j] as f64;
                for i in 0..self.segment_dims[j] / 2 {
                    let theta = self.bases[j].powf(-2.0 * i as f64 / d);
                    let angle = m as f64 * theta;
                    cos.push(T::of(angle.cos()));
                    sin.push(T::of(angle.sin()));
                }
            }
        }
        if positions.is_empty() {
            return Err(shape_err("rope", "no positions"));
        }
        Ok(RotaryTable { seq_len: positions.len(), pairs, cos, sin })
    }
}

/// Rotates each head vector of `x` (`tokens × heads·head_dim`) by its token's
/// position. `positions` has one entry per token, or one per sequence
/// position when `x` stacks several sequences of that length.
pub fn apply_rope_nd<T: Real>(
    x: &Array<T>,
    positions: &[Vec<usize>],
    cfg: &RopeNdConfig,
) -> Result<Array<T>> {
    if !x.cols().is_multiple_of(cfg.head_dim()) {
        return Err(shape_err(
            "apply_rope_nd",
            format!("width {} vs head dim {}", x.cols(), cfg.head_dim()),
        ));
    }
    let table = Arc::new(cfg.table::<T>(positions)?);
    let mut g = Graph::new();
    let v = g.constant(x.clone())?;
    let out = g.rotary(v, table)?;
    Ok(g.value(out).clone())
}
