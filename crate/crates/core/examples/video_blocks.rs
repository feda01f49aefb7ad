//! Video as a three-dimensional grid: frame groups become blocks, so each
//! block is generated conditioned on the frames before it.

use acdit::cli::export::write_video;
use acdit::cli::{SyntheticDataset, SyntheticKind};
use acdit::engine::sample;
use acdit::layout::BlockLayout;
use acdit::model::{Acdit, ModelConfig};
use acdit::schedule::{NoiseSchedule, SamplerConfig};
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

fn main() -> acdit::Result<()> {
    let layout = BlockLayout::new(&[6, 8, 8], &[3, 8, 8])?;
    println!("6 frames of 8x8 in blocks of 3 frames: N={} B={}", layout.num_blocks(), layout.block_size());
    for (seq, raster) in layout.order().iter().enumerate().step_by(64) {
        println!("  sequence index {seq:3} -> frame {}", raster / 64);
    }

    let data = SyntheticDataset::new(SyntheticKind::Video, 4, &[6, 8, 8], 0)?;
    let (clip, label) = data.get(1);
    println!("clip 1 (class {label}), frame maxima:");
    for f in 0..6 {
        let frame = &clip.data()[f * 64..(f + 1) * 64];
        let (i, _) = frame.iter().enumerate().fold((0, f32::MIN), |m, (i, &v)| if v > m.1 { (i, v) } else { m });
        println!("  frame {f}: peak at ({}, {})", i / 8, i % 8);
    }

    let cfg = ModelConfig {
        grid: vec![6, 8, 8],
        // blocks count patched tokens: 3 frames of 4x4
        block: vec![3, 4, 4],
        patch: vec![1, 2, 2],
        hidden: 48,
        heads: 2,
        mlp: 96,
        timesteps: 100,
        ..ModelConfig::default()
    };
    let (model, params) = Acdit::new::<f32, _>(cfg, &mut Xoshiro256PlusPlus::seed_from_u64(0))?;
    let sampler = SamplerConfig { steps: 10, ..SamplerConfig::default() };
    let clips = sample(&model, &params, &NoiseSchedule::linear(100)?, &[0], &sampler, &mut Xoshiro256PlusPlus::seed_from_u64(3))?;
    println!("untrained sample shape {:?}", clips[0].shape());
    let dir = std::env::temp_dir().join("acdit_video_example");
    write_video(&dir, &clip)?;
    println!("training clip written to {}", dir.display());
    Ok(())
}
