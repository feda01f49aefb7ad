#![allow(dead_code)]

use acdit::model::{Acdit, ModelConfig, TrainInputs};
use acdit::numerics::{Array, ParamStore, Real};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

pub fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// Small image model: 4×4 grid, 2 channels, block side chosen by `n`.
pub fn tiny_config(n: usize) -> ModelConfig {
    let block = match n {
        1 => vec![4, 4],
        2 => vec![2, 4],
        4 => vec![2, 2],
        8 => vec![1, 2],
        _ => panic!("unsupported block count {n}"),
    };
    ModelConfig {
        layers: 2,
        hidden: 16,
        heads: 2,
        mlp: 32,
        channels: 2,
        grid: vec![4, 4],
        patch: vec![1, 1],
        block,
        timesteps: 100,
        num_labels: 3,
        label_drop: 0.1,
        norm_eps: 1e-6,
        rope_bases: None,
    }
}

/// Model with every parameter randomized, so no path is silenced by a zero gate.
pub fn random_model<T: Real>(cfg: ModelConfig, seed: u64) -> (Acdit, ParamStore<T>) {
    let mut r = rng(seed);
    let (m, mut p) = Acdit::new::<T, _>(cfg, &mut r).unwrap();
    m.randomize(&mut p, 0.3, &mut r);
    (m, p)
}

/// Random inputs; with `shared`, block `i` has the same timestep in every batch element.
pub fn random_inputs<T: Real>(m: &Acdit, batch: usize, shared: bool, seed: u64) -> TrainInputs<T> {
    let mut r = rng(seed);
    let l = m.layout().seq_len();
    let n = m.layout().num_blocks();
    let tc = m.config().token_channels();
    let clean = Array::<T>::randn(vec![batch * l, tc], 1.0, &mut r);
    let noise = Array::<T>::randn(vec![batch * l, tc], 1.0, &mut r);
    let per_block: Vec<usize> = (0..n).map(|_| r.gen_range(1..=m.config().timesteps)).collect();
    let timesteps = if shared {
        (0..batch).flat_map(|_| per_block.iter().copied()).collect()
    } else {
        (0..batch * n).map(|_| r.gen_range(1..=m.config().timesteps)).collect()
    };
    let labels = (0..batch).map(|_| r.gen_range(0..=m.config().num_labels)).collect();
    TrainInputs { clean, noise, timesteps, labels }
}

/// Rows of block `i` of every batch element from a `(batch·L) × c` array.
pub fn block_rows<T: Real>(x: &Array<T>, l: usize, b: usize, i: usize, batch: usize) -> Array<T> {
    let parts: Vec<Array<T>> =
        (0..batch).map(|e| x.slice_rows(e * l + i * b, e * l + (i + 1) * b).unwrap()).collect();
    Array::concat_rows(&parts.iter().collect::<Vec<_>>()).unwrap()
}

pub fn max_abs<T: Real>(a: &Array<T>, b: &Array<T>) -> f64 {
    a.max_abs_diff(b)
}
