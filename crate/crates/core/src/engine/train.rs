use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::ScamMask;
use crate::model::{Acdit, TrainInputs};
use crate::numerics::{Array, Gradients, Graph, ParamStore, Real, Var};
use crate::schedule::NoiseSchedule;

/// Warmup, steady plateau, then linear decay over the final fraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WsdSchedule {
    pub warmup: u64,
    pub total: u64,
    pub decay_fraction: f64,
    pub peak: f64,
    pub floor: f64,
}

impl Default for WsdSchedule {
    fn default() -> Self {
        WsdSchedule { warmup: 0, total: 1, decay_fraction: 0.15, peak: 3e-4, floor: 0.0 }
    }
}

impl WsdSchedule {
    pub fn decay_start(&self) -> f64 {
        (1.0 - self.decay_fraction) * self.total as f64
    }

    pub fn lr(&self, step: u64) -> Result<f64> {
        wsd_lr(step, self)
    }
}

pub fn wsd_lr(step: u64, s: &WsdSchedule) -> Result<f64> {
    if step > s.total {
        return Err(Error::Schedule(format!("step {step} beyond total {}", s.total)));
    }
    if !(0.0..=1.0).contains(&s.decay_fraction) {
        return Err(Error::Schedule(format!("decay fraction {}", s.decay_fraction)));
    }
    let x = step as f64;
    if step < s.warmup {
        return Ok(s.peak * x / s.warmup as f64);
    }
    let start = s.decay_start();
    if x <= start || s.decay_fraction == 0.0 {
        return Ok(s.peak);
    }
    let progress = (x - start) / (s.total as f64 - start);
    Ok(s.peak * (1.0 - progress) + s.floor * progress)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// Mean over every element of every block.
    Mean,
    /// Per-block mean, summed over blocks.
    SumBlocks,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: WsdSchedule,
    pub optimizer: AdamWConfig,
    pub ema_decay: f64,
    /// One timestep shared by all blocks of a sample instead of one per block.
    pub shared_timestep: bool,
    pub loss_reduction: LossReduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            batch_size: 32,
            seed: 0,
            lr: WsdSchedule { warmup: 25, total: 500, ..WsdSchedule::default() },
            optimizer: AdamWConfig::default(),
            ema_decay: 0.9999,
            shared_timestep: false,
            loss_reduction: LossReduction::Mean,
        }
    }
}

/// Deterministic RNG for one (seed, step, stream) triple.
pub fn step_rng(seed: u64, step: u64, stream: u64) -> Xoshiro256PlusPlus {
    let mix = seed
        ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    Xoshiro256PlusPlus::seed_from_u64(mix)
}

pub const STREAM_NOISE: u64 = 1;
pub const STREAM_DATA: u64 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub params: ParamStore<f32>,
    pub ema: ParamStore<f32>,
    pub adam_m: ParamStore<f32>,
    pub adam_v: ParamStore<f32>,
}

impl TrainState {
    pub fn new(params: ParamStore<f32>) -> Self {
        TrainState {
            step: 0,
            ema: params.clone(),
            adam_m: params.zeros_like(),
            adam_v: params.zeros_like(),
            params,
        }
    }

    /// `ema ← d·ema + (1−d)·param`.
    pub fn ema_update(&mut self, decay: f64) {
        for id in self.params.ids().collect::<Vec<_>>() {
            let p = self.params.get(id).data().to_vec();
            for (e, &x) in self.ema.get_mut(id).data_mut().iter_mut().zip(&p) {
                *e = (decay * *e as f64 + (1.0 - decay) * x as f64) as f32;
            }
        }
    }

    /// One AdamW update at learning rate `lr`; `self.step` counts completed updates.
    pub fn adamw_update(&mut self, grads: &Gradients<f32>, lr: f64, cfg: &AdamWConfig) {
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for id in self.params.ids().collect::<Vec<_>>() {
            let n = self.params.get(id).len();
            let zeros;
            let g = match grads.get(id) {
                Some(g) => g.data(),
                None => {
                    zeros = vec![0.0f32; n];
                    &zeros
                }
            };
            let m = self.adam_m.get_mut(id).data_mut();
            for (m, &g) in m.iter_mut().zip(g) {
                *m = (cfg.beta1 * *m as f64 + (1.0 - cfg.beta1) * g as f64) as f32;
            }
            let v = self.adam_v.get_mut(id).data_mut();
            for (v, &g) in v.iter_mut().zip(g) {
                *v = (cfg.beta2 * *v as f64 + (1.0 - cfg.beta2) * (g as f64).powi(2)) as f32;
            }
            let m = self.adam_m.get(id).data().to_vec();
            let v = self.adam_v.get(id).data().to_vec();
            for ((p, &m), &v) in self.params.get_mut(id).data_mut().iter_mut().zip(&m).zip(&v) {
                let mh = m as f64 / bc1;
                let vh = v as f64 / bc2;
                let upd = mh / (vh.sqrt() + cfg.eps) + cfg.weight_decay * *p as f64;
                *p = (*p as f64 - lr * upd) as f32;
            }
        }
    }
}

/// Noised training batch together with the injected noise.
#[derive(Clone, Debug)]
pub struct PreparedBatch<T: Real = f32> {
    pub inputs: TrainInputs<T>,
    pub eps: Array<T>,
}

/// Blockifies grids, draws per-block timesteps and noise, noises every
/// block, and drops labels to the null label with the configured probability.
///
/// Draw order per sample: timesteps, then noise, then the label-drop coin.
pub fn prepare_batch<R: Rng + ?Sized>(
    model: &Acdit,
    schedule: &NoiseSchedule,
    grids: &[Array<f32>],
    labels: &[usize],
    shared_timestep: bool,
    rng: &mut R,
) -> Result<PreparedBatch<f32>> {
    if grids.len() != labels.len() || grids.is_empty() {
        return Err(Error::Invalid(format!("{} grids for {} labels", grids.len(), labels.len())));
    }
    let layout = model.layout();
    let (n, b) = (layout.num_blocks(), layout.block_size());
    let tc = model.config().token_channels();
    let total = schedule.steps();
    let mut clean = Vec::with_capacity(grids.len() * layout.seq_len() * tc);
    let mut noise = Vec::with_capacity(clean.capacity());
    let mut eps_all = Vec::with_capacity(clean.capacity());
    let mut timesteps = Vec::with_capacity(grids.len() * n);
    let mut out_labels = Vec::with_capacity(labels.len());
    for (grid, &label) in grids.iter().zip(labels) {
        if label >= model.config().num_labels {
            return Err(Error::Invalid(format!("label {label} out of range")));
        }
        let tokens = model.grid_to_tokens(grid)?;
        let ts: Vec<usize> = if shared_timestep {
            vec![rng.gen_range(1..=total); n]
        } else {
            (0..n).map(|_| rng.gen_range(1..=total)).collect()
        };
        let eps = Array::<f32>::randn(vec![layout.seq_len(), tc], 1.0, rng);
        for (i, &t) in ts.iter().enumerate() {
            let blk = tokens.slice_rows(i * b, (i + 1) * b)?;
            let e = eps.slice_rows(i * b, (i + 1) * b)?;
            noise.extend_from_slice(schedule.q_sample(&blk, t, &e)?.data());
        }
        clean.extend_from_slice(tokens.data());
        eps_all.extend_from_slice(eps.data());
        timesteps.extend(ts);
        let drop: f64 = rng.gen();
        out_labels.push(if drop < model.config().label_drop { model.null_label() } else { label });
    }
    let rows = grids.len() * layout.seq_len();
    Ok(PreparedBatch {
        inputs: TrainInputs {
            clean: Array::new(vec![rows, tc], clean)?,
            noise: Array::new(vec![rows, tc], noise)?,
            timesteps,
            labels: out_labels,
        },
        eps: Array::new(vec![rows, tc], eps_all)?,
    })
}

/// ε-prediction loss node for a prepared batch.
pub fn training_loss<T: Real>(
    model: &Acdit,
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    batch: &PreparedBatch<T>,
    mask: &ScamMask,
    reduction: LossReduction,
) -> Result<Var> {
    let out = model.forward_train(g, params, &batch.inputs, mask)?;
    let target = g.constant(batch.eps.clone())?;
    let loss = g.mse(out.pred_eps, target)?;
    match reduction {
        LossReduction::Mean => Ok(loss),
        LossReduction::SumBlocks => g.scale(loss, T::of(model.layout().num_blocks() as f64)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Owns the model definition, noise schedule and training hyperparameters.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Acdit,
    pub schedule: NoiseSchedule,
    pub config: TrainConfig,
    mask: ScamMask,
}

impl Trainer {
    pub fn new(model: Acdit, config: TrainConfig) -> Result<Self> {
        let schedule = NoiseSchedule::linear(model.config().timesteps)?;
        let mask = ScamMask::build(model.layout());
        if config.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(Trainer { model, schedule, config, mask })
    }

    pub fn mask(&self) -> &ScamMask {
        &self.mask
    }

    /// One optimization step on the given batch; randomness comes from
    /// `step_rng(seed, state.step, STREAM_NOISE)`.
    pub fn train_step(
        &self,
        state: &mut TrainState,
        grids: &[Array<f32>],
        labels: &[usize],
    ) -> Result<StepReport> {
        let mut rng = step_rng(self.config.seed, state.step, STREAM_NOISE);
        let batch =
            prepare_batch(&self.model, &self.schedule, grids, labels, self.config.shared_timestep, &mut rng)?;
        let mut g = Graph::new();
        let loss = training_loss(
            &self.model,
            &mut g,
            &state.params,
            &batch,
            &self.mask,
            self.config.loss_reduction,
        )
        .map_err(|e| match e {
            Error::NonFinite { .. } => Error::NonFiniteLoss { step: state.step, loss: f64::NAN },
            other => other,
        })?;
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step: state.step, loss: value });
        }
        let grads = g.backward(loss)?;
        let lr = self.config.lr.lr(state.step + 1)?;
        state.adamw_update(&grads, lr, &self.config.optimizer);
        state.ema_update(self.config.ema_decay);
        state.step += 1;
        Ok(StepReport { step: state.step, lr, loss: value })
    }
}

/// Uniform random draws of `batch` indices from `0..len`.
pub fn draw_indices<R: Rng + ?Sized>(len: usize, batch: usize, rng: &mut R) -> Vec<usize> {
    (0..batch).map(|_| rng.gen_range(0..len)).collect()
}

/// Standard normal array, exposed for samplers and tests.
pub fn gaussian<R: Rng + ?Sized>(shape: Vec<usize>, rng: &mut R) -> Array<f32> {
    let len = shape.iter().product();
    Array::new(shape, (0..len).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())
        .expect("positive extents")
}
