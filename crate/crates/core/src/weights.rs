//! Named parameter storage, topology declaration and initialization.
//!
//! Each network block knows how to pull its tensors out of a [`Loader`].
//! Running the same loading code against no source yields the full topology
//! (every required name with its shape and init rule), which doubles as the
//! validation list for weight bundles and the recipe for fresh weights.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::config::EngineConfig;
use crate::csu::CsuModel;
use crate::diffusion::{DiffusionMlp, NoiseSchedule};
use crate::error::{Error, Result};
use crate::ibu::IbuModel;
use crate::pmp::PmpModel;
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::{Attention, FeedForward, LayerNorm, Linear, Tensor};

/// How a parameter is filled by [`Weights::init`].
#[derive(Debug, Clone, PartialEq)]
pub enum InitRule {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    Ones,
    Zeros,
    /// Uniform in `±scale`.
    Uniform(f32),
    /// adaLN projection `cond → parts·width`; the listed parts are gates and
    /// start at zero under [`InitMode::Standard`].
    Modulation {
        fan_in: usize,
        width: usize,
        gates: Vec<usize>,
    },
    /// A learned gate vector, zero under [`InitMode::Standard`].
    Gate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: (usize, usize),
    pub rule: InitRule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// Fan-in uniform weights with every gate zeroed, so each modulated block
    /// starts as an identity map.
    Standard,
    /// Every parameter random, gates included, and norms perturbed away from
    /// identity. Used to probe information flow in an untrained network.
    Random,
}

/// Flat name → tensor map. Vectors are stored as `1 × n` tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Weights {
    tensors: BTreeMap<String, Tensor<f32>>,
}

impl Weights {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<f32>> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.tensors.iter()
    }

    /// Fresh weights for the topology of `cfg`.
    pub fn init(cfg: &EngineConfig, seed: u64, mode: InitMode) -> Result<Self> {
        Self::init_specs(topology(cfg)?, seed, mode)
    }

    /// Fresh weights for an explicit parameter list.
    pub fn init_specs(specs: Vec<ParamSpec>, seed: u64, mode: InitMode) -> Result<Self> {
        let mut rng = Rng::seeded(seed);
        let mut w = Weights::new();
        for spec in specs {
            let (r, c) = spec.shape;
            let mut data = alloc::vec![0.0f32; r * c];
            fill(&mut data, &spec, mode, &mut rng);
            w.insert(spec.name, Tensor::from_vec(r, c, data)?);
        }
        Ok(w)
    }

    /// Checks that every tensor required by `cfg` is present with the right
    /// shape. Extra tensors are allowed.
    pub fn validate(&self, cfg: &EngineConfig) -> Result<()> {
        for spec in topology(cfg)? {
            match self.get(&spec.name) {
                None => return Err(Error::MissingTensor(spec.name)),
                Some(t) if t.shape() != spec.shape => {
                    return Err(Error::TensorShape {
                        name: spec.name,
                        expected: spec.shape,
                        found: t.shape(),
                    })
                }
                Some(t) if !t.all_finite() => {
                    return Err(Error::validation(format!(
                        "tensor `{}` contains non-finite values",
                        spec.name
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

fn fill(data: &mut [f32], spec: &ParamSpec, mode: InitMode, rng: &mut Rng) {
    let random = mode == InitMode::Random;
    let cols = spec.shape.1.max(1);
    match &spec.rule {
        InitRule::FanIn(fan_in) => {
            let b = 1.0 / libm::sqrt((*fan_in).max(1) as f64);
            data.iter_mut().for_each(|v| *v = rng.uniform(-b, b) as f32);
        }
        InitRule::Ones if random => {
            data.iter_mut()
                .for_each(|v| *v = rng.uniform(0.8, 1.2) as f32);
        }
        InitRule::Ones => data.iter_mut().for_each(|v| *v = 1.0),
        InitRule::Zeros if random => {
            data.iter_mut()
                .for_each(|v| *v = rng.uniform(-0.2, 0.2) as f32);
        }
        InitRule::Zeros => {}
        InitRule::Uniform(s) => {
            let s = *s as f64;
            data.iter_mut().for_each(|v| *v = rng.uniform(-s, s) as f32);
        }
        InitRule::Modulation {
            fan_in,
            width,
            gates,
        } => {
            let b = 1.0 / libm::sqrt((*fan_in).max(1) as f64);
            for (i, v) in data.iter_mut().enumerate() {
                let part = (i % cols) / (*width).max(1);
                let draw = rng.uniform(-b, b) as f32;
                *v = if !random && gates.contains(&part) {
                    0.0
                } else {
                    draw
                };
            }
        }
        InitRule::Gate if random => {
            data.iter_mut()
                .for_each(|v| *v = rng.uniform(0.5, 1.0) as f32);
        }
        InitRule::Gate => {}
    }
}

/// Declares (and optionally loads) named parameters.
pub struct Loader<'a> {
    source: Option<&'a Weights>,
    declared: Vec<ParamSpec>,
}

impl<'a> Loader<'a> {
    pub fn from_weights(w: &'a Weights) -> Self {
        Loader {
            source: Some(w),
            declared: Vec::new(),
        }
    }

    pub fn declare_only() -> Self {
        Loader {
            source: None,
            declared: Vec::new(),
        }
    }

    pub fn into_specs(self) -> Vec<ParamSpec> {
        self.declared
    }

    pub fn tensor<T: Real>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rule: InitRule,
    ) -> Result<Tensor<T>> {
        self.declared.push(ParamSpec {
            name: name.to_string(),
            shape: (rows, cols),
            rule,
        });
        match self.source {
            None => Ok(Tensor::zeros(rows, cols)),
            Some(w) => {
                let t = w
                    .get(name)
                    .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
                if t.shape() != (rows, cols) {
                    return Err(Error::TensorShape {
                        name: name.to_string(),
                        expected: (rows, cols),
                        found: t.shape(),
                    });
                }
                Ok(t.cast())
            }
        }
    }

    pub fn vector<T: Real>(&mut self, name: &str, len: usize, rule: InitRule) -> Result<Vec<T>> {
        Ok(self.tensor(name, 1, len, rule)?.into_data())
    }

    pub fn linear<T: Real>(
        &mut self,
        prefix: &str,
        inputs: usize,
        outputs: usize,
    ) -> Result<Linear<T>> {
        let weight = self.tensor(
            &format!("{prefix}.w"),
            inputs,
            outputs,
            InitRule::FanIn(inputs),
        )?;
        let bias = self.vector(&format!("{prefix}.b"), outputs, InitRule::FanIn(inputs))?;
        Linear::new(weight, bias)
    }

    /// Projection whose output is split into `parts` slices of `width`; the
    /// slices listed in `gates` start at zero.
    pub fn modulation<T: Real>(
        &mut self,
        prefix: &str,
        cond: usize,
        width: usize,
        parts: usize,
        gates: &[usize],
    ) -> Result<Linear<T>> {
        let rule = InitRule::Modulation {
            fan_in: cond,
            width,
            gates: gates.to_vec(),
        };
        let weight = self.tensor(&format!("{prefix}.w"), cond, parts * width, rule.clone())?;
        let bias = self.vector(&format!("{prefix}.b"), parts * width, rule)?;
        Linear::new(weight, bias)
    }

    pub fn layer_norm<T: Real>(&mut self, prefix: &str, dim: usize) -> Result<LayerNorm<T>> {
        Ok(LayerNorm {
            gain: self.vector(&format!("{prefix}.g"), dim, InitRule::Ones)?,
            shift: self.vector(&format!("{prefix}.b"), dim, InitRule::Zeros)?,
        })
    }

    pub fn feed_forward<T: Real>(
        &mut self,
        prefix: &str,
        dim: usize,
        hidden: usize,
    ) -> Result<FeedForward<T>> {
        Ok(FeedForward {
            fc1: self.linear(&format!("{prefix}.ff1"), dim, hidden)?,
            fc2: self.linear(&format!("{prefix}.ff2"), hidden, dim)?,
        })
    }

    pub fn attention<T: Real>(
        &mut self,
        prefix: &str,
        q_dim: usize,
        kv_dim: usize,
        cfg: &EngineConfig,
    ) -> Result<Attention<T>> {
        let inner = cfg.inner_dim();
        Ok(Attention {
            q: self.linear(&format!("{prefix}.q"), q_dim, inner)?,
            k: self.linear(&format!("{prefix}.k"), kv_dim, inner)?,
            v: self.linear(&format!("{prefix}.v"), kv_dim, inner)?,
            o: self.linear(&format!("{prefix}.o"), inner, q_dim)?,
            heads: cfg.heads,
        })
    }
}

/// Every parameter the configured topology requires.
pub fn topology(cfg: &EngineConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let mut l = Loader::declare_only();
    Model::load_parts(cfg, &mut l)?;
    Ok(l.into_specs())
}

/// The complete network: IBU, CSU, PMP and the diffusion head, plus the
/// noise schedule derived from the configuration. Immutable once built and
/// shared between sessions.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: EngineConfig,
    pub ibu: IbuModel,
    pub csu: CsuModel,
    pub pmp: PmpModel,
    pub diffmlp: DiffusionMlp<f32>,
    pub schedule: NoiseSchedule,
}

type Parts = (IbuModel, CsuModel, PmpModel, DiffusionMlp<f32>);

impl Model {
    pub fn from_weights(cfg: &EngineConfig, w: &Weights) -> Result<Self> {
        cfg.validate()?;
        let mut l = Loader::from_weights(w);
        let (ibu, csu, pmp, diffmlp) = Self::load_parts(cfg, &mut l)?;
        let schedule = NoiseSchedule::build(
            cfg.train_steps,
            cfg.beta_start,
            cfg.beta_end,
            cfg.inference_steps,
        )?;
        Ok(Model {
            config: cfg.clone(),
            ibu,
            csu,
            pmp,
            diffmlp,
            schedule,
        })
    }

    pub fn init(cfg: &EngineConfig, seed: u64, mode: InitMode) -> Result<Self> {
        Self::from_weights(cfg, &Weights::init(cfg, seed, mode)?)
    }

    pub fn shared(self) -> Arc<Self> {
        Arc::new(self)
    }

    fn load_parts(cfg: &EngineConfig, l: &mut Loader<'_>) -> Result<Parts> {
        let ibu = IbuModel::load(l, cfg)?;
        let csu = CsuModel::load(l, cfg)?;
        let pmp = PmpModel::load(l, cfg)?;
        let diffmlp = DiffusionMlp::load(
            l,
            "diffmlp",
            &crate::diffusion::DiffusionDims::from_config(cfg),
        )?;
        Ok((ibu, csu, pmp, diffmlp))
    }
}
