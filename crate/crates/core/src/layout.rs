//! Block arithmetic over D-dimensional token grids and the skip-causal
//! attention mask.
//!
//! Sequence convention for training: indices `[0, L)` are the clean tokens,
//! `[L, 2L)` the noise tokens, both in block order (blocks raster-scanned over
//! block coordinates, tokens raster-scanned inside each block).

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Array, AttentionMask, Real};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockLayout {
    grid: Vec<usize>,
    block_shape: Vec<usize>,
    blocks_per_dim: Vec<usize>,
    block_size: usize,
    num_blocks: usize,
    seq_len: usize,
}

fn raster(coords: &[usize], extents: &[usize]) -> usize {
    coords.iter().zip(extents).fold(0, |acc, (&c, &e)| acc * e + c)
}

fn unraster(mut index: usize, extents: &[usize]) -> Vec<usize> {
    let mut out = vec![0; extents.len()];
    for (o, &e) in out.iter_mut().zip(extents).rev() {
        *o = index % e;
        index /= e;
    }
    out
}

impl BlockLayout {
    pub fn new(grid: &[usize], block_shape: &[usize]) -> Result<Self> {
        if grid.is_empty() || grid.len() != block_shape.len() {
            return Err(Error::Layout(format!(
                "grid {grid:?} and block {block_shape:?} must have equal nonzero rank"
            )));
        }
        if grid.iter().chain(block_shape).any(|&e| e == 0) {
            return Err(Error::Layout(format!("zero extent in grid {grid:?} / block {block_shape:?}")));
        }
        if let Some(d) = (0..grid.len()).find(|&d| !grid[d].is_multiple_of(block_shape[d])) {
            return Err(Error::Layout(format!(
                "block extent {} does not divide grid extent {} in dimension {d}",
                block_shape[d], grid[d]
            )));
        }
        let blocks_per_dim: Vec<usize> = grid.iter().zip(block_shape).map(|(g, b)| g / b).collect();
        let block_size = block_shape.iter().product();
        let num_blocks = blocks_per_dim.iter().product();
        Ok(BlockLayout {
            grid: grid.to_vec(),
            block_shape: block_shape.to_vec(),
            blocks_per_dim,
            block_size,
            num_blocks,
            seq_len: grid.iter().product(),
        })
    }

    /// Square `√B×√B` blocks over a 2-D grid.
    pub fn square(height: usize, width: usize, block_side: usize) -> Result<Self> {
        Self::new(&[height, width], &[block_side, block_side])
    }

    pub fn grid(&self) -> &[usize] {
        &self.grid
    }

    pub fn block_shape(&self) -> &[usize] {
        &self.block_shape
    }

    pub fn blocks_per_dim(&self) -> &[usize] {
        &self.blocks_per_dim
    }

    pub fn dims(&self) -> usize {
        self.grid.len()
    }

    /// Tokens per block (B).
    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// Number of autoregressive blocks (N).
    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    /// Total tokens (L = N·B).
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Block index and in-block offset coordinates of a grid token.
    pub fn locate(&self, coord: &[usize]) -> Result<(usize, Vec<usize>)> {
        if coord.len() != self.dims() || coord.iter().zip(&self.grid).any(|(c, g)| c >= g) {
            return Err(Error::Layout(format!("coordinate {coord:?} outside grid {:?}", self.grid)));
        }
        let block: Vec<usize> = coord.iter().zip(&self.block_shape).map(|(c, b)| c / b).collect();
        let offset = coord.iter().zip(&self.block_shape).map(|(c, b)| c % b).collect();
        Ok((raster(&block, &self.blocks_per_dim), offset))
    }

    /// Grid coordinates of token `offset` (raster index) in block `block`.
    pub fn coord_of(&self, block: usize, offset: usize) -> Vec<usize> {
        let bc = unraster(block, &self.blocks_per_dim);
        let oc = unraster(offset, &self.block_shape);
        bc.iter()
            .zip(&oc)
            .zip(&self.block_shape)
            .map(|((b, o), s)| b * s + o)
            .collect()
    }

    /// For each block-ordered sequence index, the raster index of its grid token.
    pub fn order(&self) -> Vec<usize> {
        (0..self.num_blocks)
            .flat_map(|i| (0..self.block_size).map(move |o| (i, o)))
            .map(|(i, o)| raster(&self.coord_of(i, o), &self.grid))
            .collect()
    }

    /// Grid coordinates of every token in block order.
    pub fn positions(&self) -> Vec<Vec<usize>> {
        (0..self.num_blocks)
            .flat_map(|i| (0..self.block_size).map(move |o| (i, o)))
            .map(|(i, o)| self.coord_of(i, o))
            .collect()
    }

    /// `[L_1, …, L_D, C]` grid → `[N, B, C]` block sequence.
    pub fn blockify<T: Real>(&self, x: &Array<T>) -> Result<Array<T>> {
        let c = self.check_grid(x)?;
        let mut data = Vec::with_capacity(x.len());
        for src in self.order() {
            data.extend_from_slice(&x.data()[src * c..(src + 1) * c]);
        }
        Array::new(vec![self.num_blocks, self.block_size, c], data)
    }

    /// Inverse of [`blockify`](Self::blockify).
    pub fn unblockify<T: Real>(&self, blocks: &Array<T>) -> Result<Array<T>> {
        let s = blocks.shape();
        if s.len() != 3 || s[0] != self.num_blocks || s[1] != self.block_size {
            return Err(shape_err(
                "unblockify",
                format!("{s:?} vs [{}, {}, C]", self.num_blocks, self.block_size),
            ));
        }
        let c = s[2];
        let mut data = vec![T::zero(); blocks.len()];
        for (seq, dst) in self.order().into_iter().enumerate() {
            data[dst * c..(dst + 1) * c].copy_from_slice(&blocks.data()[seq * c..(seq + 1) * c]);
        }
        let mut shape = self.grid.clone();
        shape.push(c);
        Array::new(shape, data)
    }

    fn check_grid<T: Real>(&self, x: &Array<T>) -> Result<usize> {
        let s = x.shape();
        if s.len() != self.dims() + 1 || s[..self.dims()] != self.grid[..] {
            return Err(shape_err(
                "blockify",
                format!("{s:?} vs grid {:?} plus channels", self.grid),
            ));
        }
        Ok(s[self.dims()])
    }
}

/// Folds non-overlapping `patch` cells of a `[E_1, …, E_D, C]` grid into
/// channels, giving `[E_1/p_1, …, E_D/p_D, C·∏p]`.
pub fn patchify<T: Real>(x: &Array<T>, patch: &[usize]) -> Result<Array<T>> {
    let (grid, c) = split_channels(x, patch)?;
    if patch.iter().all(|&p| p == 1) {
        return Ok(x.clone());
    }
    let tokens: Vec<usize> = grid.iter().zip(patch).map(|(g, p)| g / p).collect();
    let per = patch.iter().product::<usize>() * c;
    let mut data = vec![T::zero(); x.len()];
    for src in 0..grid.iter().product::<usize>() {
        let coord = unraster(src, &grid);
        let tok: Vec<usize> = coord.iter().zip(patch).map(|(a, p)| a / p).collect();
        let inner: Vec<usize> = coord.iter().zip(patch).map(|(a, p)| a % p).collect();
        let dst = raster(&tok, &tokens) * per + raster(&inner, patch) * c;
        data[dst..dst + c].copy_from_slice(&x.data()[src * c..(src + 1) * c]);
    }
    let mut shape = tokens;
    shape.push(per);
    Array::new(shape, data)
}

/// Inverse of [`patchify`]; `channels` is the per-cell channel count.
pub fn unpatchify<T: Real>(x: &Array<T>, patch: &[usize], channels: usize) -> Result<Array<T>> {
    let d = patch.len();
    let s = x.shape();
    let per = patch.iter().product::<usize>() * channels;
    if s.len() != d + 1 || s[d] != per {
        return Err(shape_err("unpatchify", format!("{s:?} with patch {patch:?}")));
    }
    if patch.iter().all(|&p| p == 1) {
        return Ok(x.clone());
    }
    let tokens = &s[..d];
    let grid: Vec<usize> = tokens.iter().zip(patch).map(|(t, p)| t * p).collect();
    let mut data = vec![T::zero(); x.len()];
    for dst in 0..grid.iter().product::<usize>() {
        let coord = unraster(dst, &grid);
        let tok: Vec<usize> = coord.iter().zip(patch).map(|(a, p)| a / p).collect();
        let inner: Vec<usize> = coord.iter().zip(patch).map(|(a, p)| a % p).collect();
        let src = raster(&tok, tokens) * per + raster(&inner, patch) * channels;
        data[dst * channels..(dst + 1) * channels].copy_from_slice(&x.data()[src..src + channels]);
    }
    let mut shape = grid;
    shape.push(channels);
    Array::new(shape, data)
}

fn split_channels<T: Real>(x: &Array<T>, patch: &[usize]) -> Result<(Vec<usize>, usize)> {
    let s = x.shape();
    let d = patch.len();
    if s.len() != d + 1 || patch.contains(&0) {
        return Err(shape_err("patchify", format!("{s:?} with patch {patch:?}")));
    }
    if let Some(k) = (0..d).find(|&k| !s[k].is_multiple_of(patch[k])) {
        return Err(Error::Layout(format!(
            "patch {} does not divide extent {} in dimension {k}",
            patch[k], s[k]
        )));
    }
    Ok((s[..d].to_vec(), s[d]))
}

/// Dense 2L×2L skip-causal attention mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScamMask {
    num_blocks: usize,
    block_size: usize,
    allowed: Vec<bool>,
}

/// Which half of the training sequence a token belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Half {
    Clean,
    Noise,
}

/// Block-level permission: may a `query` token of block `qi` attend a `key` token of block `kj`?
fn block_permits(query: Half, qi: usize, key: Half, kj: usize) -> bool {
    match (query, key) {
        (Half::Clean, Half::Clean) => kj <= qi,
        (Half::Noise, Half::Clean) => kj < qi,
        (Half::Noise, Half::Noise) => kj == qi,
        (Half::Clean, Half::Noise) => false,
    }
}

impl ScamMask {
    pub fn build(layout: &BlockLayout) -> Self {
        Self::from_blocks(layout.num_blocks(), layout.block_size())
    }

    /// Mask for `n` blocks of `b` tokens each.
    pub fn from_blocks(n: usize, b: usize) -> Self {
        let l = n * b;
        let side = 2 * l;
        let mut allowed = vec![false; side * side];
        for qh in [Half::Clean, Half::Noise] {
            for kh in [Half::Clean, Half::Noise] {
                for qi in 0..n {
                    for kj in 0..n {
                        if !block_permits(qh, qi, kh, kj) {
                            continue;
                        }
                        let q0 = if qh == Half::Clean { 0 } else { l } + qi * b;
                        let k0 = if kh == Half::Clean { 0 } else { l } + kj * b;
                        for r in q0..q0 + b {
                            allowed[r * side + k0..r * side + k0 + b].fill(true);
                        }
                    }
                }
            }
        }
        ScamMask { num_blocks: n, block_size: b, allowed }
    }

    /// Side length 2L.
    pub fn side(&self) -> usize {
        2 * self.num_blocks * self.block_size
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn allowed(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.side() + key]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    /// Permitted (query block, key block) pairs over the 2N×2N block grid.
    pub fn block_pairs(&self) -> usize {
        let b = self.block_size;
        let nb = 2 * self.num_blocks;
        (0..nb)
            .flat_map(|i| (0..nb).map(move |j| (i, j)))
            .filter(|&(i, j)| self.allowed(i * b, j * b))
            .count()
    }

    pub fn to_attention(&self) -> AttentionMask {
        AttentionMask::from_dense(self.side(), self.side(), self.allowed.clone())
            .expect("every skip-causal row permits its own block")
    }

    /// One line per query token; blocks separated by spaces, halves by `|`.
    pub fn render(&self) -> String {
        let side = self.side();
        let l = side / 2;
        let mut out = String::with_capacity(side * (side + side / self.block_size + 1));
        for r in 0..side {
            for c in 0..side {
                if c > 0 && c % self.block_size == 0 {
                    out.push(if c == l { '|' } else { ' ' });
                }
                out.push(if self.allowed(r, c) { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }
}

/// Noise block `i` attending `i·B` cached clean keys plus its own `B` keys.
///
/// Every entry is permitted; the shape alone encodes the restriction of the
/// training mask to `{c_<i, n_i}`.
pub fn inference_mask(i: usize, layout: &BlockLayout) -> Result<AttentionMask> {
    if i >= layout.num_blocks() {
        return Err(Error::Layout(format!("block {i} of {}", layout.num_blocks())));
    }
    let b = layout.block_size();
    AttentionMask::full(b, (i + 1) * b)
}

/// Rows of the training mask for noise block `i`, restricted to the columns
/// `{c_<i, n_i}` in that order.
pub fn sliced_training_mask(mask: &ScamMask, i: usize) -> Vec<bool> {
    let b = mask.block_size();
    let l = mask.num_blocks() * b;
    let cols: Vec<usize> = (0..i * b).chain(l + i * b..l + (i + 1) * b).collect();
    (l + i * b..l + (i + 1) * b)
        .flat_map(|r| cols.iter().map(move |&c| (r, c)))
        .map(|(r, c)| mask.allowed(r, c))
        .collect()
}
