//! Continuous DDPM head: noise schedule, respaced ancestral sampler and the
//! noise-predicting MLP.

mod mlp;

pub use mlp::{DiffusionBlock, DiffusionDims, DiffusionMlp, Tape};

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;

/// Linear beta schedule over the training steps plus its respacing to the
/// inference steps.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    /// Training-step indices visited at inference, ascending.
    pub timesteps: Vec<usize>,
    /// Respaced `β'_k = 1 − ᾱ_{τk}/ᾱ_{τ(k−1)}`, aligned with `timesteps`.
    pub step_betas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(
        train_steps: usize,
        beta_start: f64,
        beta_end: f64,
        inference_steps: usize,
    ) -> Result<Self> {
        if train_steps == 0 || inference_steps == 0 || inference_steps > train_steps {
            return Err(Error::config(format!(
                "cannot respace {train_steps} training steps to {inference_steps}"
            )));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::config(format!(
                "bad beta range ({beta_start}, {beta_end})"
            )));
        }
        let n = train_steps;
        let betas: Vec<f64> = (0..n)
            .map(|i| {
                if n == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (n - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(n);
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        let timesteps = respace(n, inference_steps);
        let mut step_betas = Vec::with_capacity(timesteps.len());
        let mut prev = 1.0;
        for &t in &timesteps {
            step_betas.push(1.0 - alpha_bars[t] / prev);
            prev = alpha_bars[t];
        }
        Ok(NoiseSchedule {
            betas,
            alpha_bars,
            timesteps,
            step_betas,
        })
    }

    pub fn train_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn inference_steps(&self) -> usize {
        self.timesteps.len()
    }

    /// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
    pub fn q_sample<T: Real>(&self, x0: &[T], t: usize, eps: &[T]) -> Vec<T> {
        let ab = self.alpha_bars[t];
        let a = T::from_f64(libm::sqrt(ab));
        let s = T::from_f64(libm::sqrt(1.0 - ab));
        x0.iter().zip(eps).map(|(&x, &e)| a * x + s * e).collect()
    }
}

/// `S` evenly spaced indices over `0..N`, rounded, both ends included.
pub fn respace(train_steps: usize, inference_steps: usize) -> Vec<usize> {
    if inference_steps == 1 {
        return alloc::vec![train_steps - 1];
    }
    let span = (train_steps - 1) as f64;
    let last = (inference_steps - 1) as f64;
    (0..inference_steps)
        .map(|k| libm::round(k as f64 * span / last) as usize)
        .collect()
}

/// Anything that predicts the noise in `x_t` at training step `t`.
pub trait NoiseEstimator<T: Real> {
    fn data_dim(&self) -> usize;
    fn estimate(&self, x: &[T], t: usize, cond: &[T]) -> Result<Vec<T>>;
}

/// Exact noise prediction for data distributed as `N(mean, std²)` per
/// coordinate, independent of the condition.
#[derive(Debug, Clone)]
pub struct GaussianOracle<'a> {
    pub schedule: &'a NoiseSchedule,
    pub mean: Vec<f64>,
    pub std: f64,
}

impl<T: Real> NoiseEstimator<T> for GaussianOracle<'_> {
    fn data_dim(&self) -> usize {
        self.mean.len()
    }

    fn estimate(&self, x: &[T], t: usize, _cond: &[T]) -> Result<Vec<T>> {
        let ab = self.schedule.alpha_bars[t];
        let s2 = self.std * self.std;
        let denom = ab * s2 + 1.0 - ab;
        Ok(x.iter()
            .zip(&self.mean)
            .map(|(&xi, &m)| {
                T::from_f64(libm::sqrt(1.0 - ab) * (xi.to_f64() - libm::sqrt(ab) * m) / denom)
            })
            .collect())
    }
}

/// `x ← (x − (1−α)/√(1−ᾱ)·ε̂)/√α + σ·z`, elementwise.
pub fn ddpm_update<T: Real>(
    x: &mut [T],
    eps_hat: &[T],
    noise: &[T],
    alpha: f64,
    alpha_bar: f64,
    sigma: f64,
) {
    let inv_sqrt_alpha = T::from_f64(1.0 / libm::sqrt(alpha));
    let coef = T::from_f64((1.0 - alpha) / libm::sqrt(1.0 - alpha_bar));
    let sigma = T::from_f64(sigma);
    for ((xi, &e), &z) in x.iter_mut().zip(eps_hat).zip(noise) {
        *xi = (*xi - coef * e) * inv_sqrt_alpha + sigma * z;
    }
}

/// One reverse step at respaced index `k`, with `σ_k = √β'_k` and no noise
/// at `k = 0`.
pub fn ddpm_step<T: Real>(
    schedule: &NoiseSchedule,
    k: usize,
    x: &mut [T],
    eps_hat: &[T],
    noise: &[T],
) {
    let beta = schedule.step_betas[k];
    let alpha_bar = schedule.alpha_bars[schedule.timesteps[k]];
    let sigma = if k == 0 { 0.0 } else { libm::sqrt(beta) };
    ddpm_update(x, eps_hat, noise, 1.0 - beta, alpha_bar, sigma);
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sampled<T> {
    pub x: Vec<T>,
    /// Number of estimator calls made.
    pub evals: usize,
}

/// Draws one sample. The starting noise and every step's noise come from
/// `rng` in a fixed order, so the result is a pure function of its inputs.
pub fn sample<T: Real, E: NoiseEstimator<T> + ?Sized>(
    estimator: &E,
    schedule: &NoiseSchedule,
    cond: &[T],
    rng: &mut Rng,
) -> Result<Sampled<T>> {
    let d = estimator.data_dim();
    let mut x: Vec<T> = (0..d).map(|_| T::from_f64(rng.normal())).collect();
    let mut noise = alloc::vec![T::ZERO; d];
    let mut evals = 0;
    for k in (0..schedule.inference_steps()).rev() {
        let eps = estimator.estimate(&x, schedule.timesteps[k], cond)?;
        evals += 1;
        if eps.len() != d {
            return Err(Error::Numeric {
                module: "diffusion",
                detail: format!("estimator returned {} values for dimension {d}", eps.len()),
            });
        }
        if k > 0 {
            noise
                .iter_mut()
                .for_each(|v| *v = T::from_f64(rng.normal()));
        }
        ddpm_step(schedule, k, &mut x, &eps, &noise);
        if !x.iter().all(|v| v.is_finite()) {
            let max = eps.iter().fold(0.0f64, |m, v| m.max(v.to_f64().abs()));
            return Err(Error::Numeric {
                module: "diffusion",
                detail: format!("non-finite sample at step {k} (max |eps| {max:e})"),
            });
        }
    }
    Ok(Sampled { x, evals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn standard() -> NoiseSchedule {
        NoiseSchedule::build(1000, 1e-4, 0.02, 15).unwrap()
    }

    #[test]
    fn linear_betas_and_cumulative_product() {
        let s = standard();
        assert_eq!(s.betas.len(), 1000);
        assert!((s.betas[0] - 1e-4).abs() < 1e-15);
        assert!((s.betas[999] - 0.02).abs() < 1e-15);
        let step = (0.02 - 1e-4) / 999.0;
        for w in s.betas.windows(2) {
            assert!((w[1] - w[0] - step).abs() < 1e-15);
        }
        // log ᾱ_T = Σ log(1-β): computed independently in closed-ish form
        let mut log_sum = 0.0;
        for i in 0..1000 {
            log_sum += libm::log(1.0 - (1e-4 + step * i as f64));
        }
        assert!((libm::log(s.alpha_bars[999]) - log_sum).abs() < 1e-9);
        assert!(s.alpha_bars[999] < 1e-4);
    }

    #[test]
    fn respacing_indices() {
        let s = standard();
        assert_eq!(
            s.timesteps,
            vec![0, 71, 143, 214, 285, 357, 428, 500, 571, 642, 714, 785, 856, 928, 999]
        );
        assert_eq!(respace(10, 10), (0..10).collect::<Vec<_>>());
        assert_eq!(respace(1000, 1), vec![999]);
    }

    #[test]
    fn respaced_betas_telescope() {
        let s = standard();
        let prod: f64 = s.step_betas.iter().map(|b| 1.0 - b).product();
        assert!((prod - s.alpha_bars[999]).abs() < 1e-12);
        assert!((s.step_betas[0] - 1e-4).abs() < 1e-15);
        assert!(s.step_betas.iter().all(|&b| b > 0.0 && b < 1.0));
    }

    #[test]
    fn rejects_bad_schedules() {
        assert!(NoiseSchedule::build(10, 1e-4, 0.02, 11).is_err());
        assert!(NoiseSchedule::build(10, 0.0, 0.02, 5).is_err());
        assert!(NoiseSchedule::build(10, 0.1, 0.02, 5).is_err());
    }

    #[test]
    fn q_sample_endpoints() {
        let s = standard();
        let x0 = [1.0f64, -2.0];
        let e = [0.5f64, 0.25];
        let x = s.q_sample(&x0, 0, &e);
        let a = libm::sqrt(1.0 - 1e-4);
        assert!((x[0] - (a + libm::sqrt(1e-4) * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn oracle_recovers_noise_for_point_mass_limit() {
        let s = standard();
        // std → 0: the exact noise is (x − √ᾱ μ)/√(1−ᾱ)
        let o = GaussianOracle {
            schedule: &s,
            mean: vec![0.3],
            std: 0.0,
        };
        let t = 500;
        let eps = 0.7;
        let x = s.q_sample(&[0.3f64], t, &[eps]);
        let got: Vec<f64> = o.estimate(&x, t, &[]).unwrap();
        assert!((got[0] - eps).abs() < 1e-12);
    }

    #[test]
    fn update_scalar_cases() {
        let mut x = [1.0f64];
        ddpm_update(&mut x, &[0.5], &[0.0], 0.99, 0.9, 0.0);
        let want = (1.0 / libm::sqrt(0.99)) * (1.0 - (0.01 / libm::sqrt(0.1)) * 0.5);
        assert!((x[0] - want).abs() < 1e-15);
        assert!((x[0] - 0.9891).abs() < 1e-4);
        let mut y = [0.3f64, -2.0];
        ddpm_update(&mut y, &[0.0, 0.0], &[9.0, 9.0], 1.0, 0.5, 0.0);
        assert_eq!(y, [0.3, -2.0]);
    }

    #[test]
    fn sampler_is_seed_deterministic() {
        let s = standard();
        let o = GaussianOracle {
            schedule: &s,
            mean: vec![0.1, 0.2, 0.3],
            std: 1.0,
        };
        let a: Sampled<f32> = sample(&o, &s, &[], &mut Rng::for_frame(5, 9)).unwrap();
        let b: Sampled<f32> = sample(&o, &s, &[], &mut Rng::for_frame(5, 9)).unwrap();
        let c: Sampled<f32> = sample(&o, &s, &[], &mut Rng::for_frame(5, 10)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.evals, 15);
        assert_ne!(a, c);
    }

    #[test]
    fn sampler_matches_gaussian_target() {
        let s = standard();
        let mut r = Rng::seeded(11);
        let dim = 8;
        let mean: Vec<f64> = (0..dim).map(|_| r.uniform(-1.0, 1.0)).collect();
        let o = GaussianOracle {
            schedule: &s,
            mean: mean.clone(),
            std: 0.9,
        };
        let n = 4000;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for i in 0..n {
            let x: Vec<f64> = sample(&o, &s, &[], &mut Rng::for_frame(3, i)).unwrap().x;
            for j in 0..dim {
                sum[j] += x[j];
                sq[j] += x[j] * x[j];
            }
        }
        for j in 0..dim {
            let m = sum[j] / n as f64;
            let v = sq[j] / n as f64 - m * m;
            assert!((m - mean[j]).abs() < 0.06, "mean {m} vs {}", mean[j]);
            assert!((v / 0.81 - 1.0).abs() < 0.12, "variance {v}");
        }
    }
}
