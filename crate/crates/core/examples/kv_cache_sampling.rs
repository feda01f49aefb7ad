//! Blockwise sampling with the KV cache against recomputing the full
//! training pass at every denoising step: same samples, different cost.

use std::time::Instant;

use acdit::engine::{sample, sample_recompute, CachedPredictor, EpsPredictor};
use acdit::model::{Acdit, ModelConfig};
use acdit::schedule::{NoiseSchedule, SamplerConfig};
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

fn main() -> acdit::Result<()> {
    let cfg = ModelConfig { grid: vec![8, 8], block: vec![2, 8], timesteps: 100, ..ModelConfig::default() };
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(0);
    let (model, mut params) = Acdit::new::<f32, _>(cfg, &mut rng)?;
    // random gates so every layer contributes
    model.randomize(&mut params, 0.2, &mut rng);
    let schedule = NoiseSchedule::linear(100)?;
    let sampler = SamplerConfig { steps: 20, ..SamplerConfig::default() };
    let labels = [0, 1, 2, 3];
    println!("{} blocks of {} tokens", model.layout().num_blocks(), model.layout().block_size());

    let t = Instant::now();
    let cached = sample(&model, &params, &schedule, &labels, &sampler, &mut Xoshiro256PlusPlus::seed_from_u64(1))?;
    let cached_time = t.elapsed();
    let t = Instant::now();
    let full = sample_recompute(&model, &params, &schedule, &labels, &sampler, &mut Xoshiro256PlusPlus::seed_from_u64(1))?;
    let full_time = t.elapsed();

    let gap = cached.iter().zip(&full).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f64::max);
    println!("cached    {:8.1} ms", cached_time.as_secs_f64() * 1e3);
    println!("recompute {:8.1} ms", full_time.as_secs_f64() * 1e3);
    println!("max |cached - recompute| = {gap:.2e}");

    let mut p = CachedPredictor::new(&model, &params, 1);
    let x = model.grid_to_tokens(&cached[0])?;
    let b = model.layout().block_size();
    let tc = x.cols();
    for i in 0..model.layout().num_blocks() {
        let block = acdit::numerics::Array::new(vec![b, tc], x.data()[i * b * tc..(i + 1) * b * tc].to_vec())?;
        p.commit(i, &block)?;
        println!("after block {i}: cache holds {} blocks, {} tokens per layer", p.cache().committed(), p.cache().len());
    }
    Ok(())
}
