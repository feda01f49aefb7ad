//! Discrete-time diffusion: forward noising, ε-loss, reverse samplers and
//! classifier-free guidance.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Array, Real};

/// β, α and ᾱ for timesteps `1..=T`, stored in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;

impl NoiseSchedule {
    /// β linearly spaced from 1e-4 to 2e-2.
    pub fn linear(steps: usize) -> Result<Self> {
        if steps < 1 {
            return Err(Error::Schedule("need at least one timestep".into()));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    BETA_START
                } else {
                    BETA_START + (BETA_END - BETA_START) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Schedule("every beta must lie in (0, 1)".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(NoiseSchedule { betas, alphas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t < 1 || t > self.steps() {
            return Err(Error::Timestep { t, lo: 1, hi: self.steps() });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.check(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.check(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.check(t)?])
    }

    /// ᾱ extended with ᾱ⁽⁰⁾ = 1.
    fn alpha_bar_or_one(&self, t: usize) -> Result<f64> {
        if t == 0 {
            Ok(1.0)
        } else {
            self.alpha_bar(t)
        }
    }

    pub fn snr(&self, t: usize) -> Result<f64> {
        let ab = self.alpha_bar(t)?;
        Ok(ab / (1.0 - ab))
    }

    /// `√ᾱ·x0 + √(1−ᾱ)·eps`.
    pub fn q_sample<T: Real>(&self, x0: &Array<T>, t: usize, eps: &Array<T>) -> Result<Array<T>> {
        let ab = self.alpha_bar(t)?;
        let (a, b) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
        x0.zip_map(eps, |x, e| a * x + b * e)
    }

    /// One reverse step from `t` down to `t_prev` (`0 ≤ t_prev < t`).
    ///
    /// With `t_prev = t − 1` the ancestral branch is the textbook DDPM update;
    /// larger jumps use the effective α between the two steps. The final
    /// step (`t_prev = 0`) never injects noise.
    pub fn reverse_step<T: Real, R: Rng + ?Sized>(
        &self,
        x_t: &Array<T>,
        pred_eps: &Array<T>,
        t: usize,
        t_prev: usize,
        mode: SamplerMode,
        rng: &mut R,
    ) -> Result<Array<T>> {
        let ab_t = self.alpha_bar(t)?;
        if t_prev >= t {
            return Err(Error::Timestep { t: t_prev, lo: 0, hi: t - 1 });
        }
        let ab_prev = self.alpha_bar_or_one(t_prev)?;
        match mode {
            SamplerMode::Deterministic => {
                let c0 = T::of(1.0 / ab_t.sqrt());
                let ce = T::of((1.0 - ab_t).sqrt());
                let (p0, pe) = (T::of(ab_prev.sqrt()), T::of((1.0 - ab_prev).sqrt()));
                x_t.zip_map(pred_eps, |x, e| {
                    let x0 = (x - ce * e) * c0;
                    p0 * x0 + pe * e
                })
            }
            SamplerMode::Ancestral => {
                let alpha = ab_t / ab_prev;
                let beta = 1.0 - alpha;
                let ce = T::of(beta / (1.0 - ab_t).sqrt());
                let inv = T::of(1.0 / alpha.sqrt());
                let mean = x_t.zip_map(pred_eps, |x, e| (x - ce * e) * inv)?;
                if t_prev == 0 {
                    return Ok(mean);
                }
                let var = (1.0 - ab_prev) / (1.0 - ab_t) * beta;
                let z = Array::<T>::randn(mean.shape().to_vec(), 1.0, rng);
                let sd = T::of(var.sqrt());
                mean.zip_map(&z, |m, n| m + sd * n)
            }
        }
    }
}

/// Mean squared error over all elements.
pub fn eps_loss<T: Real>(pred_eps: &Array<T>, true_eps: &Array<T>) -> Result<f64> {
    if pred_eps.shape() != true_eps.shape() {
        return Err(shape_err(
            "eps_loss",
            format!("{:?} vs {:?}", pred_eps.shape(), true_eps.shape()),
        ));
    }
    let sum: f64 = pred_eps
        .data()
        .iter()
        .zip(true_eps.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    Ok(sum / pred_eps.len() as f64)
}

/// `eps_uncond + s·(eps_cond − eps_uncond)`.
pub fn guided_eps<T: Real>(eps_cond: &Array<T>, eps_uncond: &Array<T>, s: f64) -> Result<Array<T>> {
    let s = T::of(s);
    eps_cond.zip_map(eps_uncond, |c, u| u + s * (c - u))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    Ancestral,
    Deterministic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub mode: SamplerMode,
    pub guidance_scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { steps: 25, mode: SamplerMode::Deterministic, guidance_scale: 1.5 }
    }
}

impl SamplerConfig {
    /// Uniform, strictly decreasing subsequence of `1..=T` ending at 1.
    pub fn timesteps(&self, total: usize) -> Result<Vec<usize>> {
        if self.steps < 1 || self.steps > total {
            return Err(Error::Schedule(format!(
                "sampler steps {} must lie in [1, {total}]",
                self.steps
            )));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::Schedule("guidance scale must be finite and >= 0".into()));
        }
        let stride = total / self.steps;
        Ok((0..self.steps).rev().map(|k| 1 + k * stride).collect())
    }
}
