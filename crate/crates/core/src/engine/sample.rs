use rand::Rng;

use crate::error::{Error, Result};
use crate::layout::ScamMask;
use crate::model::{Acdit, TrainInputs};
use crate::numerics::{Array, Graph, ParamStore, Real};
use crate::schedule::{guided_eps, NoiseSchedule, SamplerConfig};

/// Source of ε predictions for the blockwise sampler.
pub trait EpsPredictor<T: Real> {
    /// ε for noise block `block` of every batch element, `(batch·B) × channels`.
    fn predict(&mut self, block: usize, x: &Array<T>, t: usize, labels: &[usize]) -> Result<Array<T>>;

    /// Called once per block with its final clean value.
    fn commit(&mut self, block: usize, clean: &Array<T>) -> Result<()>;
}

/// Keys and values of committed blocks are kept in a [`KvCache`](super::KvCache).
pub struct CachedPredictor<'a, T: Real> {
    model: &'a Acdit,
    params: &'a ParamStore<T>,
    cache: super::KvCache<T>,
}

impl<'a, T: Real> CachedPredictor<'a, T> {
    pub fn new(model: &'a Acdit, params: &'a ParamStore<T>, batch: usize) -> Self {
        CachedPredictor { model, params, cache: model.new_cache(batch) }
    }

    pub fn cache(&self) -> &super::KvCache<T> {
        &self.cache
    }
}

impl<T: Real> EpsPredictor<T> for CachedPredictor<'_, T> {
    fn predict(&mut self, block: usize, x: &Array<T>, t: usize, labels: &[usize]) -> Result<Array<T>> {
        self.model.forward_block_infer(self.params, x, t, labels, &self.cache, block)
    }

    fn commit(&mut self, block: usize, clean: &Array<T>) -> Result<()> {
        self.model.commit_clean_block(self.params, clean, &mut self.cache, block)
    }
}

/// Runs the full training pass at every denoising step. Unknown blocks are
/// filled with zeros; the mask keeps them from influencing block `i`.
pub struct RecomputePredictor<'a, T: Real> {
    model: &'a Acdit,
    params: &'a ParamStore<T>,
    mask: ScamMask,
    clean: Vec<Array<T>>,
}

impl<'a, T: Real> RecomputePredictor<'a, T> {
    pub fn new(model: &'a Acdit, params: &'a ParamStore<T>) -> Self {
        RecomputePredictor { model, params, mask: ScamMask::build(model.layout()), clean: Vec::new() }
    }

    /// Places block-major `(batch·B) × tc` data for block `i` into a
    /// `(batch·L) × tc` buffer.
    fn scatter(&self, dst: &mut [T], block: usize, src: &Array<T>, batch: usize) {
        let layout = self.model.layout();
        let (b, l) = (layout.block_size(), layout.seq_len());
        let w = b * self.model.config().token_channels();
        for e in 0..batch {
            let off = (e * l / b + block) * w;
            dst[off..off + w].copy_from_slice(&src.data()[e * w..(e + 1) * w]);
        }
    }
}

impl<T: Real> EpsPredictor<T> for RecomputePredictor<'_, T> {
    fn predict(&mut self, block: usize, x: &Array<T>, t: usize, labels: &[usize]) -> Result<Array<T>> {
        if block != self.clean.len() {
            return Err(Error::Cache(format!(
                "block {block} requested with {} committed",
                self.clean.len()
            )));
        }
        let layout = self.model.layout();
        let (n, b, l) = (layout.num_blocks(), layout.block_size(), layout.seq_len());
        let tc = self.model.config().token_channels();
        let batch = labels.len();
        let mut clean = vec![T::zero(); batch * l * tc];
        for (j, c) in self.clean.iter().enumerate() {
            self.scatter(&mut clean, j, c, batch);
        }
        let mut noise = vec![T::zero(); batch * l * tc];
        self.scatter(&mut noise, block, x, batch);
        let inputs = TrainInputs {
            clean: Array::new(vec![batch * l, tc], clean)?,
            noise: Array::new(vec![batch * l, tc], noise)?,
            timesteps: vec![t; batch * n],
            labels: labels.to_vec(),
        };
        let mut g = Graph::new();
        let out = self.model.forward_train(&mut g, self.params, &inputs, &self.mask)?;
        let pred = g.value(out.pred_eps);
        let parts = (0..batch)
            .map(|e| pred.slice_rows(e * l + block * b, e * l + (block + 1) * b))
            .collect::<Result<Vec<_>>>()?;
        Array::concat_rows(&parts.iter().collect::<Vec<_>>())
    }

    fn commit(&mut self, block: usize, clean: &Array<T>) -> Result<()> {
        if block != self.clean.len() {
            return Err(Error::Cache(format!("commit of block {block} with {} committed", self.clean.len())));
        }
        self.clean.push(clean.clone());
        Ok(())
    }
}

/// Plain full-sequence diffusion over the whole grid; only valid for a
/// single-block layout.
pub struct FullSequencePredictor<'a, T: Real> {
    model: &'a Acdit,
    params: &'a ParamStore<T>,
}

impl<'a, T: Real> FullSequencePredictor<'a, T> {
    pub fn new(model: &'a Acdit, params: &'a ParamStore<T>) -> Result<Self> {
        if model.layout().num_blocks() != 1 {
            return Err(Error::Layout(format!(
                "full-sequence sampling needs one block, layout has {}",
                model.layout().num_blocks()
            )));
        }
        Ok(FullSequencePredictor { model, params })
    }
}

impl<T: Real> EpsPredictor<T> for FullSequencePredictor<'_, T> {
    fn predict(&mut self, block: usize, x: &Array<T>, t: usize, labels: &[usize]) -> Result<Array<T>> {
        if block != 0 {
            return Err(Error::Layout(format!("block {block} of 1")));
        }
        let mut g = Graph::new();
        let out = self.model.forward_full_sequence(&mut g, self.params, x, &vec![t; labels.len()], labels)?;
        Ok(g.value(out).clone())
    }

    fn commit(&mut self, _block: usize, _clean: &Array<T>) -> Result<()> {
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Sampled<T: Real = f32> {
    /// One `[grid…, channels]` array per label.
    pub grids: Vec<Array<T>>,
    /// `x` after every reverse step, block by block, when recording.
    pub trajectory: Vec<Array<T>>,
}

/// Blockwise autoregressive sampling: every block starts from pure noise,
/// is denoised over the sampler's timesteps attending the committed blocks,
/// then committed.
pub fn sample_with<T, P, R>(
    predictor: &mut P,
    model: &Acdit,
    schedule: &NoiseSchedule,
    labels: &[usize],
    cfg: &SamplerConfig,
    record: bool,
    rng: &mut R,
) -> Result<Sampled<T>>
where
    T: Real,
    P: EpsPredictor<T>,
    R: Rng + ?Sized,
{
    if labels.is_empty() {
        return Err(Error::Invalid("no labels to sample".into()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y > model.null_label()) {
        return Err(Error::Invalid(format!("label {y} exceeds null label {}", model.null_label())));
    }
    let steps = cfg.timesteps(schedule.steps())?;
    let layout = model.layout();
    let (n, b) = (layout.num_blocks(), layout.block_size());
    let tc = model.config().token_channels();
    let batch = labels.len();
    let null = vec![model.null_label(); batch];
    let mut blocks = Vec::with_capacity(n);
    let mut trajectory = Vec::new();
    for i in 0..n {
        let mut x = Array::<T>::randn(vec![batch * b, tc], 1.0, rng);
        for (k, &t) in steps.iter().enumerate() {
            let t_prev = steps.get(k + 1).copied().unwrap_or(0);
            let cond = predictor.predict(i, &x, t, labels)?;
            let eps = if cfg.guidance_scale == 1.0 {
                cond
            } else {
                let uncond = predictor.predict(i, &x, t, &null)?;
                guided_eps(&cond, &uncond, cfg.guidance_scale)?
            };
            x = schedule.reverse_step(&x, &eps, t, t_prev, cfg.mode, rng)?;
            if record {
                trajectory.push(x.clone());
            }
        }
        predictor.commit(i, &x)?;
        blocks.push(x);
    }
    let w = b * tc;
    let grids = (0..batch)
        .map(|e| {
            let mut tokens = Vec::with_capacity(n * w);
            for blk in &blocks {
                tokens.extend_from_slice(&blk.data()[e * w..(e + 1) * w]);
            }
            model.tokens_to_grid(&Array::new(vec![n * b, tc], tokens)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Sampled { grids, trajectory })
}

/// KV-cached sampling.
pub fn sample<T: Real, R: Rng + ?Sized>(
    model: &Acdit,
    params: &ParamStore<T>,
    schedule: &NoiseSchedule,
    labels: &[usize],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<Array<T>>> {
    let mut p = CachedPredictor::new(model, params, labels.len());
    Ok(sample_with(&mut p, model, schedule, labels, cfg, false, rng)?.grids)
}

/// Sampling that recomputes the full training pass at every step.
pub fn sample_recompute<T: Real, R: Rng + ?Sized>(
    model: &Acdit,
    params: &ParamStore<T>,
    schedule: &NoiseSchedule,
    labels: &[usize],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<Array<T>>> {
    let mut p = RecomputePredictor::new(model, params);
    Ok(sample_with(&mut p, model, schedule, labels, cfg, false, rng)?.grids)
}
