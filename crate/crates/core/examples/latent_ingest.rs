//! Writes a latent container, reads it back, and trains on it for a few
//! steps through the run-config path.

use acdit::cli::{cmd_gen_data, cmd_ingest, cmd_train, DataSpec, GenDataRequest, RunConfig, SyntheticKind};
use acdit::model::ModelConfig;

fn main() -> acdit::Result<()> {
    let dir = std::env::temp_dir().join("acdit_latent_example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("gradients.acdl");
    let req = GenDataRequest {
        kind: SyntheticKind::Gradients,
        classes: 3,
        grid: vec![8, 8],
        count: 96,
        seed: 0,
        out: path.clone(),
    };
    cmd_gen_data(&req)?;
    let (set, summary) = cmd_ingest(&path)?;
    print!("{summary}");
    println!("{} bytes on disk", std::fs::metadata(&path)?.len());

    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        grid: vec![8, 8],
        block: vec![4, 4],
        channels: 3,
        num_labels: set.num_classes(),
        hidden: 32,
        heads: 2,
        mlp: 64,
        timesteps: 100,
        ..ModelConfig::default()
    };
    cfg.data = DataSpec::Latents { path };
    cfg.train.steps = 20;
    cfg.train.lr.total = 20;
    cfg.train.lr.warmup = 2;
    cfg.train.lr.peak = 1e-3;
    cfg.train.batch_size = 8;
    cfg.output.dir = dir.join("run");
    let s = cmd_train(&cfg, None)?;
    println!("loss {:.4} -> {:.4} over {} steps", s.losses[0], s.losses[s.losses.len() - 1], s.steps);
    println!("checkpoint {}", s.checkpoint.display());

    cfg.model.grid = vec![4, 4];
    cfg.model.block = vec![2, 2];
    match cmd_train(&cfg, None) {
        Err(e) => println!("mismatched model rejected: {e}"),
        Ok(_) => println!("mismatched model unexpectedly accepted"),
    }
    Ok(())
}
