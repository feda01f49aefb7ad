//! Trains a small model on the 4-class blob dataset and compares
//! class-conditional samples against the class mean images.

use std::time::Instant;

use acdit::cli::{SyntheticDataset, SyntheticKind, TrainData};
use acdit::engine::{sample, TrainConfig, TrainState, Trainer, WsdSchedule};
use acdit::model::{Acdit, ModelConfig};
use acdit::schedule::SamplerConfig;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

fn main() -> acdit::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let peak: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let per_class: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(64);

    let data = SyntheticDataset::new(SyntheticKind::Blobs, 4, &[16, 16], 0)?;
    let cfg = ModelConfig { patch: vec![2, 2], block: vec![4, 4], ..ModelConfig::default() };
    let (model, params) = Acdit::new::<f32, _>(cfg, &mut Xoshiro256PlusPlus::seed_from_u64(0))?;
    let train = TrainConfig {
        steps,
        batch_size: 32,
        lr: WsdSchedule { warmup: 25.min(steps), total: steps, peak, ..WsdSchedule::default() },
        ..TrainConfig::default()
    };
    let trainer = Trainer::new(model.clone(), train.clone())?;
    let batches = TrainData::Synthetic(data.clone());
    let mut state = TrainState::new(params);
    let mut losses = Vec::new();
    let start = Instant::now();
    while state.step < steps {
        let (grids, labels) = batches.batch(train.seed, state.step, train.batch_size);
        let r = trainer.train_step(&mut state, &grids, &labels)?;
        losses.push(r.loss);
        if r.step % 50 == 0 {
            println!("step {:4}  lr {:.2e}  loss {:.4}  {:.1}s", r.step, r.lr, r.loss, start.elapsed().as_secs_f64());
        }
    }
    let head: f64 = losses.iter().take(10).sum::<f64>() / 10.0;
    let tail: f64 = losses.iter().rev().take(50).sum::<f64>() / 50.0;
    println!("first-10 mean {head:.4}  last-50 mean {tail:.4}  ratio {:.3}", tail / head);

    let sampler = SamplerConfig::default();
    for class in 0..4 {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(100 + class as u64);
        let grids = sample(&model, &state.params, &trainer.schedule, &vec![class; per_class], &sampler, &mut rng)?;
        let mut mean = vec![0.0f64; 256];
        for g in &grids {
            for (m, &v) in mean.iter_mut().zip(g.data()) {
                *m += v as f64 / per_class as f64;
            }
        }
        let pop = data.population_mean(class)?;
        let diffs: Vec<f64> = mean.iter().zip(pop.data()).map(|(a, &b)| a - b as f64).collect();
        let rms = (diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64).sqrt();
        let max = diffs.iter().fold(0.0f64, |a, d| a.max(d.abs()));
        let mean_pixel = (mean.iter().sum::<f64>() - pop.data().iter().map(|&v| v as f64).sum::<f64>()) / 256.0;
        println!("class {class}: rms {rms:.4}  max {max:.4}  mean-pixel diff {mean_pixel:.4}  {:.1}s", start.elapsed().as_secs_f64());
    }
    Ok(())
}
