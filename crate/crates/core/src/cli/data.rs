//! Synthetic class-conditional datasets. Every item is a pure function of
//! `(class, seed, index)`, and the per-class mean image is computed exactly
//! by averaging over the finite set of jitter choices.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Array;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// One Gaussian blob per class at a class-specific position.
    Blobs,
    /// Three-channel linear color ramps with a class-specific direction and palette.
    Gradients,
    /// A blob bouncing off the walls; the class fixes its velocity.
    Video,
}

impl SyntheticKind {
    pub fn channels(self) -> usize {
        match self {
            SyntheticKind::Gradients => 3,
            _ => 1,
        }
    }

    pub fn rank(self) -> usize {
        match self {
            SyntheticKind::Video => 3,
            _ => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub kind: SyntheticKind,
    pub classes: usize,
    /// `[H, W]` for images, `[frames, H, W]` for video.
    pub grid: Vec<usize>,
    pub seed: u64,
}

const JITTER: [(i64, i64); 9] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1)];

impl SyntheticDataset {
    pub fn new(kind: SyntheticKind, classes: usize, grid: &[usize], seed: u64) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Config("dataset needs at least one class".into()));
        }
        if grid.len() != kind.rank() || grid.iter().any(|&e| e < 2) {
            return Err(Error::Config(format!("{kind:?} grid {grid:?} needs rank {} with extents >= 2", kind.rank())));
        }
        Ok(SyntheticDataset { kind, classes, grid: grid.to_vec(), seed })
    }

    pub fn channels(&self) -> usize {
        self.kind.channels()
    }

    /// `[grid…, channels]`.
    pub fn item_shape(&self) -> Vec<usize> {
        self.grid.iter().copied().chain([self.channels()]).collect()
    }

    /// Class of item `index` in a generated sequence.
    pub fn label_of(&self, index: u64) -> usize {
        (index % self.classes as u64) as usize
    }

    /// Number of distinct jitter choices per class.
    pub fn variants(&self) -> usize {
        match self.kind {
            SyntheticKind::Blobs | SyntheticKind::Video => JITTER.len(),
            SyntheticKind::Gradients => 3,
        }
    }

    fn variant(&self, class: usize, index: u64) -> usize {
        let mix = self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ (class as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
            ^ index.wrapping_mul(0x94D0_49BB_1331_11EB);
        Xoshiro256PlusPlus::seed_from_u64(mix).gen_range(0..self.variants())
    }

    pub fn item(&self, class: usize, index: u64) -> Result<Array<f32>> {
        if class >= self.classes {
            return Err(Error::Invalid(format!("class {class} of {}", self.classes)));
        }
        Ok(self.render(class, self.variant(class, index)))
    }

    /// Item `index` of the generated sequence with its label.
    pub fn get(&self, index: u64) -> (Array<f32>, usize) {
        let c = self.label_of(index);
        (self.render(c, self.variant(c, index)), c)
    }

    pub fn generate(&self, count: usize) -> Vec<(Array<f32>, usize)> {
        (0..count as u64).map(|i| self.get(i)).collect()
    }

    /// Exact per-class mean image.
    pub fn population_mean(&self, class: usize) -> Result<Array<f32>> {
        if class >= self.classes {
            return Err(Error::Invalid(format!("class {class} of {}", self.classes)));
        }
        let n = self.variants();
        let mut acc = vec![0.0f64; self.item_shape().iter().product()];
        for v in 0..n {
            for (a, &x) in acc.iter_mut().zip(self.render(class, v).data()) {
                *a += x as f64;
            }
        }
        Array::new(self.item_shape(), acc.into_iter().map(|a| (a / n as f64) as f32).collect())
    }

    fn render(&self, class: usize, variant: usize) -> Array<f32> {
        match self.kind {
            SyntheticKind::Blobs => {
                let (h, w) = (self.grid[0], self.grid[1]);
                let (cy, cx) = self.blob_center(class, variant);
                let sigma = h.min(w) as f64 / 8.0;
                let data = (0..h * w)
                    .map(|p| blob_value((p / w) as f64, (p % w) as f64, cy, cx, sigma))
                    .collect();
                Array::new(self.item_shape(), data).expect("item shape")
            }
            SyntheticKind::Gradients => {
                let (h, w) = (self.grid[0], self.grid[1]);
                let angle = 2.0 * PI * class as f64 / self.classes as f64;
                let (dy, dx) = (angle.sin(), angle.cos());
                let shift = (variant as f64 - 1.0) * 0.25;
                let palette = |ch: usize| 2.0 * PI * (class as f64 / self.classes as f64 + ch as f64 / 3.0);
                let mut data = Vec::with_capacity(h * w * 3);
                for y in 0..h {
                    for x in 0..w {
                        let u = 2.0 * y as f64 / (h - 1) as f64 - 1.0;
                        let v = 2.0 * x as f64 / (w - 1) as f64 - 1.0;
                        let s = ((u * dy + v * dx) / 2f64.sqrt() + shift).clamp(-1.0, 1.0);
                        for ch in 0..3 {
                            data.push((0.8 * s * palette(ch).cos()) as f32);
                        }
                    }
                }
                Array::new(self.item_shape(), data).expect("item shape")
            }
            SyntheticKind::Video => {
                let (f, h, w) = (self.grid[0], self.grid[1], self.grid[2]);
                let sigma = h.min(w) as f64 / 8.0;
                let (vy, vx) = [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)][class % 4];
                let speed = 1.0 + (class / 4) as f64;
                let (jy, jx) = JITTER[variant];
                let (y0, x0) = ((h as f64 - 1.0) / 2.0 + jy as f64, (w as f64 - 1.0) / 2.0 + jx as f64);
                let mut data = Vec::with_capacity(f * h * w);
                for t in 0..f {
                    let cy = reflect(y0 + speed * vy * t as f64, h as f64 - 1.0);
                    let cx = reflect(x0 + speed * vx * t as f64, w as f64 - 1.0);
                    for p in 0..h * w {
                        data.push(blob_value((p / w) as f64, (p % w) as f64, cy, cx, sigma));
                    }
                }
                Array::new(self.item_shape(), data).expect("item shape")
            }
        }
    }

    /// Classes sit on a `k×k` lattice of cell centers, `k = ⌈√classes⌉`.
    fn blob_center(&self, class: usize, variant: usize) -> (f64, f64) {
        let k = (self.classes as f64).sqrt().ceil() as usize;
        let (h, w) = (self.grid[0] as f64, self.grid[1] as f64);
        let (r, c) = (class / k, class % k);
        let (jy, jx) = JITTER[variant];
        ((r as f64 + 0.5) * h / k as f64 - 0.5 + jy as f64, (c as f64 + 0.5) * w / k as f64 - 0.5 + jx as f64)
    }
}

/// `−1 + 2·exp(−d²/2σ²)`.
fn blob_value(y: f64, x: f64, cy: f64, cx: f64, sigma: f64) -> f32 {
    let d2 = (y - cy).powi(2) + (x - cx).powi(2);
    (-1.0 + 2.0 * (-d2 / (2.0 * sigma * sigma)).exp()) as f32
}

/// Folds `x` into `[0, hi]` by mirror reflection.
fn reflect(x: f64, hi: f64) -> f64 {
    let period = 2.0 * hi;
    let m = x.rem_euclid(period);
    if m <= hi {
        m
    } else {
        period - m
    }
}
