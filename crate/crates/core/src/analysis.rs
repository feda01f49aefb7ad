//! Analytic FLOPS model of full-sequence attention versus blockwise
//! attention over a KV cache. A multiply-accumulate counts as 2 FLOPs.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostParams {
    /// Sequence length in tokens.
    pub l: usize,
    /// Block size in tokens.
    pub b: usize,
    /// Hidden width.
    pub h: usize,
    /// Attention heads.
    pub n: usize,
    /// Parameters per layer.
    pub theta: f64,
}

impl CostParams {
    pub fn new(l: usize, b: usize, h: usize, n: usize, theta: f64) -> Result<Self> {
        let p = CostParams { l, b, h, n, theta };
        p.validate()?;
        Ok(p)
    }

    /// `θ = 12h²`, the usual attention-plus-4x-MLP layer.
    pub fn standard(l: usize, b: usize, h: usize, n: usize) -> Result<Self> {
        Self::new(l, b, h, n, 12.0 * (h as f64).powi(2))
    }

    pub fn validate(&self) -> Result<()> {
        if self.l == 0 || self.b == 0 || self.h == 0 || self.n == 0 {
            return Err(Error::Invalid(format!("cost parameters must be positive: {self:?}")));
        }
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(Error::Invalid(format!("theta {} must be positive", self.theta)));
        }
        if !self.l.is_multiple_of(self.b) {
            return Err(Error::Layout(format!("block size {} does not divide {}", self.b, self.l)));
        }
        Ok(())
    }

    /// `θ/h²`.
    pub fn m(&self) -> f64 {
        self.theta / (self.h as f64).powi(2)
    }

    /// `L/h`.
    pub fn k(&self) -> f64 {
        self.l as f64 / self.h as f64
    }

    pub fn with_block(&self, b: usize) -> Result<Self> {
        Self::new(self.l, b, self.h, self.n, self.theta)
    }
}

/// `2Lθ + 4(h+n)L²`.
pub fn full_flops(p: &CostParams) -> f64 {
    let l = p.l as f64;
    2.0 * l * p.theta + 4.0 * (p.h + p.n) as f64 * l * l
}

/// `2Lθ + 4hL²`.
pub fn full_flops_approx(p: &CostParams) -> f64 {
    let l = p.l as f64;
    2.0 * l * p.theta + 4.0 * p.h as f64 * l * l
}

/// Query-key pairs of blockwise attention: block `i` attends `i` blocks.
pub fn qk_pairs_blockwise(l: usize, b: usize) -> Result<u128> {
    let (sum, closed) = qk_pairs_both(l, b)?;
    if sum != closed {
        return Err(Error::Invalid(format!("pair count {sum} != closed form {closed}")));
    }
    Ok(sum)
}

/// `(∑_{i=1}^{L/B} i·B², ½(L/B + L²/B²)·B²)`.
pub fn qk_pairs_both(l: usize, b: usize) -> Result<(u128, u128)> {
    if b == 0 || l == 0 || !l.is_multiple_of(b) {
        return Err(Error::Layout(format!("block size {b} does not divide {l}")));
    }
    let blocks = (l / b) as u128;
    let b2 = (b as u128).pow(2);
    let sum = (1..=blocks).map(|i| i * b2).sum();
    let closed = (blocks + blocks * blocks) * b2 / 2;
    Ok((sum, closed))
}

/// Full cost with the attention term scaled by the blockwise pair count.
pub fn blockwise_flops(p: &CostParams) -> Result<f64> {
    p.validate()?;
    let pairs = qk_pairs_blockwise(p.l, p.b)? as f64;
    Ok(2.0 * p.l as f64 * p.theta + 4.0 * (p.h + p.n) as f64 * pairs)
}

/// `(1 − B/L)/(2 + m/k)`.
pub fn saved_fraction(p: &CostParams) -> f64 {
    (1.0 - p.b as f64 / p.l as f64) / (2.0 + p.m() / p.k())
}

/// The same fraction recomputed as attention-pair savings over the
/// approximate full cost.
pub fn saved_fraction_from_pairs(p: &CostParams) -> Result<f64> {
    let l = p.l as f64;
    let saved_pairs = l * l - qk_pairs_blockwise(p.l, p.b)? as f64;
    Ok(4.0 * p.h as f64 * saved_pairs / full_flops_approx(p))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostRow {
    pub l: usize,
    pub b: usize,
    pub full_flops: f64,
    pub blockwise_flops: f64,
    pub saved_fraction: f64,
}

pub const COST_HEADER: &str = "L,B,full_flops,blockwise_flops,saved_fraction";

/// One row per `(L, B)`; `h`, `n` and `θ` come from `p`.
pub fn cost_curve(layouts: &[(usize, usize)], p: &CostParams) -> Result<Vec<CostRow>> {
    layouts
        .iter()
        .map(|&(l, b)| {
            let q = CostParams::new(l, b, p.h, p.n, p.theta)?;
            Ok(CostRow {
                l,
                b,
                full_flops: full_flops(&q),
                blockwise_flops: blockwise_flops(&q)?,
                saved_fraction: saved_fraction(&q),
            })
        })
        .collect()
}

pub fn cost_csv(rows: &[CostRow]) -> String {
    let mut out = String::from(COST_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:?},{:?},{:?}",
            r.l, r.b, r.full_flops, r.blockwise_flops, r.saved_fraction
        );
    }
    out
}

pub fn parse_cost_csv(text: &str) -> Result<Vec<CostRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(COST_HEADER) {
        return Err(Error::Invalid("missing cost curve header".into()));
    }
    lines
        .filter(|s| !s.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(Error::Invalid(format!("bad cost row {line:?}")));
            }
            let bad = || Error::Invalid(format!("bad cost row {line:?}"));
            Ok(CostRow {
                l: f[0].parse().map_err(|_| bad())?,
                b: f[1].parse().map_err(|_| bad())?,
                full_flops: f[2].parse().map_err(|_| bad())?,
                blockwise_flops: f[3].parse().map_err(|_| bad())?,
                saved_fraction: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// `B = L, L/2, L/4, …, 1` for power-of-two `L`, otherwise every divisor
/// of `L` in decreasing order.
pub fn halving_blocks(l: usize) -> Vec<usize> {
    (1..=l).rev().filter(|b| l.is_multiple_of(*b)).collect()
}
