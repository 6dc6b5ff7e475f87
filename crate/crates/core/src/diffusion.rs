//! Linear-beta noise schedule, forward noising, ancestral and deterministic
//! reverse samplers, and the epsilon-prediction loss.
//!
//! Timesteps are 1-indexed: `t` ranges over `1..=T` and `t = 0` denotes the
//! clean sample with `alpha_bar(0) = 1`.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SchedulerConfig {
    pub beta_1: f64,
    pub beta_t: f64,
    pub steps: usize,
    /// Interpolate linearly in `sqrt(beta)` instead of `beta`.
    pub sqrt_space: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig { beta_1: 0.00085, beta_t: 0.0120, steps: 1000, sqrt_space: false }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        let SchedulerConfig { beta_1, beta_t, steps, .. } = *self;
        if !(beta_1 > 0.0 && beta_1 <= beta_t && beta_t < 1.0) {
            return Err(Error::Config(format!("scheduler needs 0 < beta_1 <= beta_T < 1, got {beta_1}, {beta_t}")));
        }
        if steps == 0 {
            return Err(Error::Config("scheduler needs T >= 1".into()));
        }
        Ok(())
    }
}

/// Immutable schedule. Vectors are indexed by `t`; slot 0 is the clean state.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub config: SchedulerConfig,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(config: SchedulerConfig) -> Result<Self> {
        config.validate()?;
        let n = config.steps;
        let mut betas = vec![0.0; n + 1];
        for (t, b) in betas.iter_mut().enumerate().skip(1) {
            let frac = if n == 1 { 0.0 } else { (t - 1) as f64 / (n - 1) as f64 };
            *b = if config.sqrt_space {
                let (lo, hi) = (config.beta_1.sqrt(), config.beta_t.sqrt());
                (lo + frac * (hi - lo)).powi(2)
            } else {
                config.beta_1 + frac * (config.beta_t - config.beta_1)
            };
        }
        // endpoints exactly as configured
        betas[1] = config.beta_1;
        if n > 1 {
            betas[n] = config.beta_t;
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = vec![1.0; n + 1];
        for t in 1..=n {
            alpha_bars[t] = alpha_bars[t - 1] * alphas[t];
        }
        Ok(NoiseSchedule { config, betas, alphas, alpha_bars })
    }

    pub fn max_t(&self) -> usize {
        self.config.steps
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.max_t() {
            return Err(Error::TimestepOutOfRange { t, max: self.max_t() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    /// `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// `betas[1..=T]`.
    pub fn betas(&self) -> &[f64] {
        &self.betas[1..]
    }

    /// `alpha_bars[1..=T]`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars[1..]
    }
}

fn check_same<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps`.
pub fn add_noise<T: Element>(z0: &Tensor<T>, eps: &Tensor<T>, t: usize, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    sched.check(t)?;
    check_same("add_noise", z0, eps)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.zip_map(eps, |z, e| T::of(a * z.f64() + b * e.f64()))
}

/// Per-clip forward noising of `(clips*L, ..)` latents; `ts[i]` is the step
/// of clip `i`.
pub fn add_noise_per_clip<T: Element>(z0: &Tensor<T>, eps: &Tensor<T>, ts: &[usize], sched: &NoiseSchedule) -> Result<Tensor<T>> {
    check_same("add_noise", z0, eps)?;
    if ts.is_empty() || !z0.len().is_multiple_of(ts.len()) {
        return Err(Error::arg("add_noise", format!("{} timesteps do not split {} elements", ts.len(), z0.len())));
    }
    let per = z0.len() / ts.len();
    let mut coef = Vec::with_capacity(ts.len());
    for &t in ts {
        sched.check(t)?;
        let ab = sched.alpha_bar(t);
        coef.push((ab.sqrt(), (1.0 - ab).sqrt()));
    }
    let data = z0
        .data()
        .iter()
        .zip(eps.data())
        .enumerate()
        .map(|(i, (&z, &e))| {
            let (a, b) = coef[i / per];
            T::of(a * z.f64() + b * e.f64())
        })
        .collect();
    Tensor::new(z0.shape(), data)
}

/// One ancestral step `z_t -> z_{t-1}`; no noise is injected at `t = 1`.
pub fn ddpm_step<T: Element>(z_t: &Tensor<T>, eps_hat: &Tensor<T>, t: usize, sched: &NoiseSchedule, rng: &mut RngState) -> Result<Tensor<T>> {
    sched.check(t)?;
    check_same("ddpm_step", z_t, eps_hat)?;
    let (beta, alpha, ab) = (sched.beta(t), sched.alpha(t), sched.alpha_bar(t));
    let k = beta / (1.0 - ab).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let sigma = beta.sqrt();
    let data = z_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&z, &e)| {
            let mean = (z.f64() - k * e.f64()) * inv;
            T::of(if t > 1 { mean + sigma * rng.normal() } else { mean })
        })
        .collect();
    Tensor::new(z_t.shape(), data)
}

/// `steps` evenly spaced timesteps from `T` down to at least 1, strictly
/// decreasing.
pub fn ddim_timesteps(steps: usize, max_t: usize) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(Error::arg("ddim", "empty timestep schedule"));
    }
    if steps > max_t {
        return Err(Error::arg("ddim", format!("{steps} steps exceed T = {max_t}")));
    }
    Ok((0..steps).rev().map(|i| ((i + 1) * max_t) / steps).collect())
}

/// Deterministic (eta = 0) sampler from `z_T` at `t = T`. `eps_fn(z, t)`
/// predicts the noise in `z` at step `t`.
pub fn ddim_sample<T: Element>(z_t: &Tensor<T>, mut eps_fn: impl FnMut(&Tensor<T>, usize) -> Result<Tensor<T>>, steps: usize, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    let ts = ddim_timesteps(steps, sched.max_t())?;
    let mut z = z_t.clone();
    for (i, &t) in ts.iter().enumerate() {
        let eps = eps_fn(&z, t)?;
        check_same("ddim", &z, &eps)?;
        let ab = sched.alpha_bar(t);
        let ab_prev = ts.get(i + 1).map_or(1.0, |&p| sched.alpha_bar(p));
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        z = z.zip_map(&eps, |zv, e| {
            let x0 = (zv.f64() - sb * e.f64()) / sa;
            T::of(pa * x0 + pb * e.f64())
        })?;
    }
    Ok(z)
}

/// Sampled training targets for one batch of clips.
pub struct NoisedBatch<T> {
    pub ts: Vec<usize>,
    pub eps: Tensor<T>,
    pub z_t: Tensor<T>,
}

/// Draw `t ~ U{1..T}` per clip and unit-normal noise, and noise `z0`.
pub fn noised_batch<T: Element>(z0: &Tensor<T>, clips: usize, sched: &NoiseSchedule, rng: &mut RngState) -> Result<NoisedBatch<T>> {
    let ts: Vec<usize> = (0..clips).map(|_| rng.int_inclusive(1, sched.max_t())).collect();
    let eps = Tensor::randn(z0.shape(), 1.0, rng);
    let z_t = add_noise_per_clip(z0, &eps, &ts, sched)?;
    Ok(NoisedBatch { ts, eps, z_t })
}

/// `mean((eps_hat - eps)^2)` on the tape. `predict(g, z_t, ts)` returns the
/// predicted noise; gradients reach whatever it reads from the store.
pub fn diffusion_loss<T: Element>(
    g: &mut Graph<'_, T>,
    z0: &Tensor<T>,
    clips: usize,
    sched: &NoiseSchedule,
    rng: &mut RngState,
    predict: impl FnOnce(&mut Graph<'_, T>, Var, &[usize]) -> Result<Var>,
) -> Result<Var> {
    let batch = noised_batch(z0, clips, sched, rng)?;
    let zv = g.constant(batch.z_t);
    let eps_hat = predict(g, zv, &batch.ts)?;
    let target = g.constant(batch.eps);
    g.mse(eps_hat, target)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timesteps_are_strictly_decreasing() {
        assert_eq!(ddim_timesteps(1, 1000).unwrap(), vec![1000]);
        assert_eq!(ddim_timesteps(4, 10).unwrap(), vec![10, 7, 5, 2]);
        let all = ddim_timesteps(1000, 1000).unwrap();
        assert!(all.windows(2).all(|w| w[0] == w[1] + 1) && all[999] == 1);
        assert!(ddim_timesteps(0, 10).is_err());
        assert!(ddim_timesteps(11, 10).is_err());
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::new(SchedulerConfig { steps: 1, ..Default::default() }).unwrap();
        assert_eq!(s.betas(), &[0.00085]);
        assert!(NoiseSchedule::new(SchedulerConfig { beta_1: 0.02, beta_t: 0.01, ..Default::default() }).is_err());
    }
}
