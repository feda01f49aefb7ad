use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use super::checkpoint::Checkpoint;
use super::config::{DataSpec, RunConfig};
use super::data::{SyntheticDataset, SyntheticKind};
use super::export::{write_ppm, write_video};
use super::latent::LatentSet;
use crate::analysis::{cost_csv, cost_curve, halving_blocks, CostParams};
use crate::engine::{draw_indices, sample, step_rng, TrainState, Trainer, STREAM_DATA};
use crate::error::{Error, Result};
use crate::layout::ScamMask;
use crate::model::Acdit;
use crate::numerics::Array;

pub const METRICS_HEADER: &str = "step,lr,loss,wall_time";

/// Training examples drawn by index.
#[derive(Clone, Debug)]
pub enum TrainData {
    Synthetic(SyntheticDataset),
    Latents(LatentSet),
}

/// Synthetic sets are indexed over this many items.
const SYNTHETIC_ITEMS: usize = 1 << 20;

impl TrainData {
    pub fn load(spec: &DataSpec, grid: &[usize]) -> Result<Self> {
        match spec {
            DataSpec::Synthetic { kind, classes, seed } => {
                Ok(TrainData::Synthetic(SyntheticDataset::new(*kind, *classes, grid, *seed)?))
            }
            DataSpec::Latents { path } => Ok(TrainData::Latents(LatentSet::load(path)?)),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TrainData::Synthetic(_) => SYNTHETIC_ITEMS,
            TrainData::Latents(l) => l.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, index: usize) -> (Array<f32>, usize) {
        match self {
            TrainData::Synthetic(d) => d.get(index as u64),
            TrainData::Latents(l) => (l.items[index].clone(), l.labels[index]),
        }
    }

    /// Items must match the model's data grid and label range.
    pub fn check_against(&self, model: &Acdit) -> Result<()> {
        let cfg = model.config();
        let want: Vec<usize> = cfg.grid.iter().copied().chain([cfg.channels]).collect();
        let (shape, classes) = match self {
            TrainData::Synthetic(d) => (d.item_shape(), d.classes),
            TrainData::Latents(l) => (l.item_shape().to_vec(), l.num_classes()),
        };
        if shape != want {
            return Err(Error::Layout(format!("data items are {shape:?}, model expects {want:?}")));
        }
        if classes > cfg.num_labels {
            return Err(Error::Config(format!("data has {classes} classes, model {} labels", cfg.num_labels)));
        }
        Ok(())
    }

    /// Batch for `step`, drawn from `step_rng(seed, step, STREAM_DATA)`.
    pub fn batch(&self, seed: u64, step: u64, size: usize) -> (Vec<Array<f32>>, Vec<usize>) {
        let mut rng = step_rng(seed, step, STREAM_DATA);
        draw_indices(self.len(), size, &mut rng).into_iter().map(|i| self.get(i)).unzip()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub losses: Vec<f64>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Fresh model and training state for a config; weights depend only on `train.seed`.
pub fn init_state(cfg: &RunConfig) -> Result<(Acdit, TrainState)> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.train.seed);
    let (model, params) = Acdit::new::<f32, _>(cfg.model.clone(), &mut rng)?;
    Ok((model, TrainState::new(params)))
}

/// Runs training to `train.steps`, optionally continuing from a checkpoint.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    let (model, mut state) = init_state(cfg)?;
    if let Some(path) = resume {
        let ck = Checkpoint::load(path)?;
        if ck.config.model != cfg.model || ck.config.train != cfg.train {
            return Err(Error::Config(format!("{} was written with a different model or trainer", path.display())));
        }
        model.check_params(&ck.state.params)?;
        state = ck.state;
    }
    let data = TrainData::load(&cfg.data, &cfg.model.grid)?;
    data.check_against(&model)?;
    let trainer = Trainer::new(model, cfg.train.clone())?;

    let out = &cfg.output;
    std::fs::create_dir_all(&out.dir)?;
    let metrics_path = out.metrics();
    let mut metrics = if resume.is_some() && metrics_path.exists() {
        OpenOptions::new().append(true).open(&metrics_path)?
    } else {
        let mut f = File::create(&metrics_path)?;
        writeln!(f, "{METRICS_HEADER}")?;
        f
    };
    let start = Instant::now();
    let mut losses = Vec::new();
    while state.step < cfg.train.steps {
        let (grids, labels) = data.batch(cfg.train.seed, state.step, cfg.train.batch_size);
        let r = trainer.train_step(&mut state, &grids, &labels)?;
        losses.push(r.loss);
        writeln!(metrics, "{},{:?},{:?},{:.3}", r.step, r.lr, r.loss, start.elapsed().as_secs_f64())?;
        if out.checkpoint_every > 0 && r.step % out.checkpoint_every == 0 && r.step < cfg.train.steps {
            Checkpoint { config: cfg.clone(), state: state.clone() }.save(&out.checkpoint())?;
        }
    }
    metrics.flush()?;
    let checkpoint = out.checkpoint();
    Checkpoint { config: cfg.clone(), state: state.clone() }.save(&checkpoint)?;
    Ok(TrainSummary { steps: state.step, losses, checkpoint, metrics: metrics_path })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weights {
    Ema,
    Live,
}

#[derive(Clone, Debug)]
pub struct SampleRequest {
    pub checkpoint: PathBuf,
    pub labels: Vec<usize>,
    /// Samples per label.
    pub count: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub weights: Weights,
}

/// Samples `count` grids per label. Writes PPM images (or per-frame PPM
/// directories for three-dimensional grids) and an `ACDL` container with
/// every sample; returns the paths written.
pub fn cmd_sample(req: &SampleRequest) -> Result<Vec<PathBuf>> {
    let ck = Checkpoint::load(&req.checkpoint)?;
    let cfg = &ck.config;
    let (model, _) = init_state(cfg)?;
    let params = match req.weights {
        Weights::Ema => &ck.state.ema,
        Weights::Live => &ck.state.params,
    };
    model.check_params(params)?;
    if let Some(&y) = req.labels.iter().find(|&&y| y >= cfg.model.num_labels) {
        return Err(Error::Invalid(format!("label {y} out of range for {} classes", cfg.model.num_labels)));
    }
    if req.labels.is_empty() || req.count == 0 {
        return Err(Error::Invalid("nothing to sample".into()));
    }
    let schedule = crate::schedule::NoiseSchedule::linear(cfg.model.timesteps)?;
    let labels: Vec<usize> = req.labels.iter().flat_map(|&y| std::iter::repeat_n(y, req.count)).collect();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(req.seed);
    let grids = sample(&model, params, &schedule, &labels, &cfg.sampler, &mut rng)?;

    std::fs::create_dir_all(&req.out_dir)?;
    let mut written = Vec::new();
    let exportable = matches!(cfg.model.channels, 1 | 3);
    for (k, (g, &y)) in grids.iter().zip(&labels).enumerate() {
        let stem = format!("sample_{y}_{:03}", k % req.count);
        match (cfg.model.grid.len(), exportable) {
            (2, true) => {
                let p = req.out_dir.join(format!("{stem}.ppm"));
                write_ppm(&p, g)?;
                written.push(p);
            }
            (3, true) => {
                let p = req.out_dir.join(stem);
                write_video(&p, g)?;
                written.push(p);
            }
            _ => {}
        }
    }
    let all = req.out_dir.join("samples.acdl");
    LatentSet::new(grids, labels)?.save(&all)?;
    written.push(all);
    Ok(written)
}

/// ASCII rendering of the training mask, one line per token.
pub fn cmd_mask_dump(n: usize, b: usize) -> Result<String> {
    if n == 0 || b == 0 {
        return Err(Error::Invalid(format!("mask-dump needs N, B >= 1, got N={n} B={b}")));
    }
    Ok(ScamMask::from_blocks(n, b).render())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopsRequest {
    pub lengths: Vec<usize>,
    /// Block sizes applied to every length; all divisors when empty.
    pub blocks: Vec<usize>,
    pub hidden: usize,
    pub heads: usize,
    /// Parameters per layer; `12h²` when absent.
    pub theta: Option<f64>,
}

/// Cost-curve CSV with header `L,B,full_flops,blockwise_flops,saved_fraction`.
pub fn cmd_flops(req: &FlopsRequest) -> Result<String> {
    if req.lengths.is_empty() {
        return Err(Error::Invalid("flops needs at least one length".into()));
    }
    let theta = req.theta.unwrap_or(12.0 * (req.hidden as f64).powi(2));
    let mut layouts = Vec::new();
    for &l in &req.lengths {
        let blocks = if req.blocks.is_empty() { halving_blocks(l) } else { req.blocks.clone() };
        for b in blocks {
            layouts.push((l, b));
        }
    }
    let (l0, b0) = layouts[0];
    let p = CostParams::new(l0, b0, req.hidden, req.heads, theta)?;
    Ok(cost_csv(&cost_curve(&layouts, &p)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenDataRequest {
    pub kind: SyntheticKind,
    pub classes: usize,
    pub grid: Vec<usize>,
    pub count: usize,
    pub seed: u64,
    pub out: PathBuf,
}

/// Writes the first `count` items of a synthetic dataset as a latent container.
pub fn cmd_gen_data(req: &GenDataRequest) -> Result<LatentSet> {
    if req.count == 0 {
        return Err(Error::Invalid("gen-data needs count >= 1".into()));
    }
    let d = SyntheticDataset::new(req.kind, req.classes, &req.grid, req.seed)?;
    let (items, labels) = d.generate(req.count).into_iter().unzip();
    let set = LatentSet::new(items, labels)?;
    set.save(&req.out)?;
    Ok(set)
}

/// Reads and summarizes a latent container. Compatibility with a model
/// layout is checked when training starts.
pub fn cmd_ingest(path: &Path) -> Result<(LatentSet, String)> {
    let set = LatentSet::load(path)?;
    let mut counts = vec![0usize; set.num_classes()];
    for &l in &set.labels {
        counts[l] += 1;
    }
    let (lo, hi) = set
        .items
        .iter()
        .flat_map(|a| a.data().iter().copied())
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let mut s = String::new();
    let _ = writeln!(s, "items: {}", set.len());
    let _ = writeln!(s, "item shape: {:?}", set.item_shape());
    let _ = writeln!(s, "classes: {} {:?}", counts.len(), counts);
    let _ = writeln!(s, "value range: [{lo}, {hi}]");
    Ok((set, s))
}
