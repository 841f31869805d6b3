//! Denoising objective, reverse-mode gradients for the diffusion head,
//! AdamW, a finite-difference gradient check and a toy conditional fitting
//! loop.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::diffusion::{sample, DiffusionDims, DiffusionMlp, NoiseSchedule};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::weights::InitMode;

/// One training example for the denoising criterion.
#[derive(Debug, Clone)]
pub struct DenoiseBatch<T> {
    pub x0: Tensor<T>,
    pub cond: Tensor<T>,
    pub t: Vec<usize>,
    pub eps: Tensor<T>,
}

impl<T: Real> DenoiseBatch<T> {
    pub fn noised(&self, schedule: &NoiseSchedule) -> Result<Tensor<T>> {
        let mut rows = Vec::with_capacity(self.x0.data().len());
        for (r, &t) in self.t.iter().enumerate() {
            rows.extend(schedule.q_sample(self.x0.row(r), t, self.eps.row(r)));
        }
        Tensor::from_vec(self.x0.rows(), self.x0.cols(), rows)
    }
}

/// `mean_b ‖ε_b − ε_θ(x_t,b | t_b, z_b)‖²`.
pub fn denoise_loss<T: Real>(
    model: &DiffusionMlp<T>,
    batch: &DenoiseBatch<T>,
    schedule: &NoiseSchedule,
) -> Result<T> {
    let out = model.forward(&batch.noised(schedule)?, &batch.t, &batch.cond)?;
    Ok(sq_loss(&out, &batch.eps).0)
}

fn sq_loss<T: Real>(out: &Tensor<T>, eps: &Tensor<T>) -> (T, Tensor<T>) {
    let b = T::from_usize(out.rows().max(1));
    let mut loss = T::ZERO;
    let mut grad = out.clone();
    for (g, &e) in grad.data_mut().iter_mut().zip(eps.data()) {
        let d = *g - e;
        loss += d * d;
        *g = (d + d) / b;
    }
    (loss / b, grad)
}

/// Loss value and gradients with respect to every parameter.
pub fn diffmlp_backward<T: Real>(
    model: &DiffusionMlp<T>,
    batch: &DenoiseBatch<T>,
    schedule: &NoiseSchedule,
) -> Result<(T, DiffusionMlp<T>)> {
    let tape = model.forward_tape(&batch.noised(schedule)?, &batch.t, &batch.cond)?;
    let (loss, d_out) = sq_loss(&tape.output, &batch.eps);
    let mut grads = model.zeros_like();
    model.backward(&tape, &d_out, &mut grads)?;
    let mut finite = true;
    grads.visit(&mut |_, _, p| finite &= p.iter().all(|v| v.is_finite()));
    if !finite || !loss.is_finite() {
        return Err(Error::Numeric {
            module: "train",
            detail: "non-finite loss or gradient".into(),
        });
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(lr: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Decoupled decay (`p ← p·(1 − lr·λ)`) then the bias-corrected Adam
    /// update.
    pub fn update(&mut self, params: &mut DiffusionMlp<T>, grads: &DiffusionMlp<T>) {
        let mut g: Vec<Vec<T>> = Vec::new();
        grads.visit(&mut |_, _, p| g.push(p.to_vec()));
        if self.m.is_empty() {
            self.m = g.iter().map(|s| vec![T::ZERO; s.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let c1 = T::from_f64(1.0 - libm::pow(self.beta1, self.step as f64));
        let c2 = T::from_f64(1.0 - libm::pow(self.beta2, self.step as f64));
        let lr = T::from_f64(self.lr);
        let decay = T::from_f64(1.0 - self.lr * self.weight_decay);
        let eps = T::from_f64(self.eps);
        let (m, v) = (&mut self.m, &mut self.v);
        params.visit_mut(&mut |slot, p| {
            for (i, w) in p.iter_mut().enumerate() {
                let gi = g[slot][i];
                let mi = &mut m[slot][i];
                *mi = b1 * *mi + (T::ONE - b1) * gi;
                let vi = &mut v[slot][i];
                *vi = b2 * *vi + (T::ONE - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w = *w * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub params: usize,
    /// `‖g_analytic − g_numeric‖ / max(‖g_analytic‖, ‖g_numeric‖)`.
    pub rel_error: f64,
}

/// Central finite differences with step `h` against the manual backward
/// pass, one entry per parameter tensor.
pub fn gradcheck(
    dims: &DiffusionDims,
    batch_size: usize,
    h: f64,
    seed: u64,
) -> Result<Vec<TensorCheck>> {
    let model: DiffusionMlp<f64> = DiffusionMlp::init("diffmlp", dims, seed, InitMode::Random)?;
    let schedule = NoiseSchedule::build(1000, 1e-4, 0.02, 15)?;
    let mut rng = Rng::seeded(seed ^ 0x5eed);
    let batch = random_batch(dims, batch_size, &schedule, &mut rng)?;
    let (_, grads) = diffmlp_backward(&model, &batch, &schedule)?;

    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    grads.visit(&mut |n, _, p| analytic.push((n.into(), p.to_vec())));
    let mut out = Vec::with_capacity(analytic.len());
    for (slot, (name, ga)) in analytic.iter().enumerate() {
        let mut diff = 0.0;
        let mut na = 0.0;
        let mut nn = 0.0;
        for (i, &a) in ga.iter().enumerate() {
            let mut shifted = model.clone();
            let mut at = |delta: f64| -> Result<f64> {
                shifted.visit_mut(&mut |s, p| {
                    if s == slot {
                        p[i] += delta
                    }
                });
                denoise_loss(&shifted, &batch, &schedule)
            };
            let plus = at(h)?;
            let minus = at(-2.0 * h)?;
            let g = (plus - minus) / (2.0 * h);
            diff += (a - g) * (a - g);
            na += a * a;
            nn += g * g;
        }
        let denom = libm::sqrt(na).max(libm::sqrt(nn));
        out.push(TensorCheck {
            name: name.clone(),
            params: ga.len(),
            rel_error: if denom == 0.0 {
                0.0
            } else {
                libm::sqrt(diff) / denom
            },
        });
    }
    Ok(out)
}

fn random_batch(
    dims: &DiffusionDims,
    n: usize,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<DenoiseBatch<f64>> {
    let mut draw =
        |r: usize, c: usize| Tensor::from_vec(r, c, (0..r * c).map(|_| rng.normal()).collect());
    let x0 = draw(n, dims.data)?;
    let cond = draw(n, dims.cond)?;
    let eps = draw(n, dims.data)?;
    let t = (0..n).map(|_| rng.below(schedule.train_steps())).collect();
    Ok(DenoiseBatch { x0, cond, t, eps })
}

/// Synthetic conditional target: condition `z_k` is one of `classes`
/// random vectors, data is `N(A·z_k, std²·I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub dims: DiffusionDims,
    pub classes: usize,
    /// Entries of `A` are uniform in `±mean_scale`.
    pub mean_scale: f64,
    pub std: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Losses averaged over this many steps for the smoothed curve.
    pub smoothing: usize,
    pub eval_samples: usize,
    pub init: InitMode,
    /// Decay of the weight average used for sampling; 0 samples from the raw weights.
    pub ema: f64,
    /// Draw training timesteps from the sampler's respaced grid instead of all
    /// training steps.
    pub sampler_grid: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            dims: DiffusionDims {
                data: 4,
                cond: 4,
                width: 64,
                hidden: 64,
                time: 32,
                blocks: 3,
            },
            classes: 4,
            mean_scale: 0.5,
            std: 0.2,
            steps: 2000,
            batch: 64,
            lr: 1e-4,
            seed: 7,
            smoothing: 100,
            eval_samples: 2000,
            init: InitMode::Standard,
            ema: 0.99,
            sampler_grid: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyReport {
    pub losses: Vec<f32>,
    pub initial_smoothed: f64,
    pub final_smoothed: f64,
    pub targets: Vec<Vec<f64>>,
    pub sample_means: Vec<Vec<f64>>,
    pub model: DiffusionMlp<f32>,
}

impl ToyReport {
    pub fn loss_ratio(&self) -> f64 {
        self.final_smoothed / self.initial_smoothed
    }

    pub fn max_mean_error(&self) -> f64 {
        self.targets
            .iter()
            .zip(&self.sample_means)
            .flat_map(|(t, m)| t.iter().zip(m).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max)
    }
}

pub struct ToyProblem {
    pub conds: Vec<Vec<f32>>,
    pub means: Vec<Vec<f64>>,
}

impl ToyProblem {
    pub fn new(cfg: &ToyConfig) -> Self {
        let mut rng = Rng::seeded(cfg.seed);
        let d = cfg.dims;
        let a: Vec<f64> = (0..d.data * d.cond)
            .map(|_| rng.uniform(-cfg.mean_scale, cfg.mean_scale))
            .collect();
        let conds: Vec<Vec<f32>> = (0..cfg.classes)
            .map(|k| {
                (0..d.cond)
                    .map(|j| if j == k % d.cond { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        let means = conds
            .iter()
            .map(|z| {
                (0..d.data)
                    .map(|i| (0..d.cond).map(|j| a[i * d.cond + j] * z[j] as f64).sum())
                    .collect()
            })
            .collect();
        ToyProblem { conds, means }
    }
}

/// Fits the toy target; divergence (loss above ten times the first smoothed
/// window) aborts.
pub fn train_toy(cfg: &ToyConfig) -> Result<ToyReport> {
    if cfg.classes == 0 || cfg.batch == 0 || cfg.smoothing == 0 || cfg.steps < cfg.smoothing {
        return Err(Error::config(
            "toy training needs classes, batch and steps ≥ smoothing",
        ));
    }
    let d = cfg.dims;
    let problem = ToyProblem::new(cfg);
    let schedule = NoiseSchedule::build(1000, 1e-4, 0.02, 15)?;
    let mut model: DiffusionMlp<f32> = DiffusionMlp::init("diffmlp", &d, cfg.seed, cfg.init)?;
    let mut opt = AdamW::new(cfg.lr);
    let mut rng = Rng::seeded(cfg.seed.wrapping_add(1));
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut initial = None;
    let mut average = model.clone();

    for step in 0..cfg.steps {
        let mut x0 = Vec::with_capacity(cfg.batch * d.data);
        let mut cond = Vec::with_capacity(cfg.batch * d.cond);
        let mut eps = Vec::with_capacity(cfg.batch * d.data);
        let mut t = Vec::with_capacity(cfg.batch);
        let offset = rng.unit();
        let n_steps = schedule.train_steps();
        for b in 0..cfg.batch {
            let k = b % cfg.classes;
            cond.extend_from_slice(&problem.conds[k]);
            for &m in &problem.means[k] {
                x0.push((m + cfg.std * rng.normal()) as f32);
            }
            for _ in 0..d.data {
                eps.push(rng.normal() as f32);
            }
            let u = (b as f64 + offset) / cfg.batch as f64;
            t.push(if cfg.sampler_grid {
                let g = &schedule.timesteps;
                g[((u * g.len() as f64) as usize).min(g.len() - 1)]
            } else {
                ((u * n_steps as f64) as usize).min(n_steps - 1)
            });
        }
        let batch = DenoiseBatch {
            x0: Tensor::from_vec(cfg.batch, d.data, x0)?,
            cond: Tensor::from_vec(cfg.batch, d.cond, cond)?,
            t,
            eps: Tensor::from_vec(cfg.batch, d.data, eps)?,
        };
        let (loss, grads) = diffmlp_backward(&model, &batch, &schedule)?;
        losses.push(loss);
        if step + 1 == cfg.smoothing {
            initial = Some(window_mean(&losses[..cfg.smoothing]));
        }
        if let Some(init) = initial {
            if loss as f64 > 10.0 * init {
                return Err(Error::Numeric {
                    module: "train",
                    detail: format!("diverged at step {step}: loss {loss} against initial {init}"),
                });
            }
        }
        opt.update(&mut model, &grads);
        if cfg.ema > 0.0 {
            ema_update(
                &mut average,
                &model,
                cfg.ema.min(1.0 - 1.0 / (step as f64 + 2.0)),
            );
        }
    }
    if cfg.ema > 0.0 {
        model = average;
    }

    let mut sample_means = Vec::with_capacity(cfg.classes);
    for (k, z) in problem.conds.iter().enumerate() {
        let mut acc = vec![0.0; d.data];
        for i in 0..cfg.eval_samples {
            let mut r = Rng::for_frame(cfg.seed ^ ((k as u64) << 32), i as u64);
            let s = sample(&model, &schedule, z, &mut r)?;
            for (a, v) in acc.iter_mut().zip(&s.x) {
                *a += *v as f64;
            }
        }
        sample_means.push(acc.iter().map(|a| a / cfg.eval_samples as f64).collect());
    }
    let n = cfg.smoothing;
    Ok(ToyReport {
        initial_smoothed: window_mean(&losses[..n]),
        final_smoothed: window_mean(&losses[losses.len() - n..]),
        losses,
        targets: problem.means,
        sample_means,
        model,
    })
}

fn ema_update(average: &mut DiffusionMlp<f32>, model: &DiffusionMlp<f32>, decay: f64) {
    let mut cur: Vec<Vec<f32>> = Vec::new();
    model.visit(&mut |_, _, p| cur.push(p.to_vec()));
    let d = decay as f32;
    average.visit_mut(&mut |slot, p| {
        for (a, &m) in p.iter_mut().zip(&cur[slot]) {
            *a = d * *a + (1.0 - d) * m;
        }
    });
}

fn window_mean(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64
}
