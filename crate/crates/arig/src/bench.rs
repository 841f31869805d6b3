//! Per-frame latency benchmark with a committed regression baseline.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use arig_core::engine::{lagged_inputs, Clock, FrameRecord, Session, SessionInit};
use arig_core::rng::Rng;
use arig_core::{EngineConfig, FrameInput, InitMode, Model, MotionVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Allowed relative drift of p50 against the baseline.
pub const TOLERANCE: f64 = 0.2;

pub struct InstantClock(Instant);

impl InstantClock {
    pub fn new() -> Self {
        InstantClock(Instant::now())
    }
}

impl Default for InstantClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for InstantClock {
    fn now_micros(&self) -> u64 {
        self.0.elapsed().as_micros() as u64
    }
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub config: EngineConfig,
    pub frames: usize,
    /// Context cache capacity used for the run.
    pub context_cap: usize,
    /// Untimed frames stepped first.
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            config: EngineConfig::default(),
            frames: 500,
            context_cap: 64,
            warmup: 20,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMeans {
    pub ibu: f64,
    pub csu: f64,
    pub pmp: f64,
    pub sampler: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardResult {
    pub baseline_p50_ms: f64,
    pub ratio: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub profile: String,
    pub frames: usize,
    pub context_cap: usize,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
    pub mean_ms: f64,
    pub fps: f64,
    pub wall_s: f64,
    /// Mean milliseconds per stage.
    pub stages_ms: StageMeans,
    /// Every frame's stage times add up to its latency.
    pub stages_sum_exact: bool,
    pub budget_ms: f64,
    pub within_budget: bool,
    pub guard: Option<GuardResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineEntry {
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub frames: usize,
    pub context_cap: usize,
}

/// Baselines keyed by machine profile.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Baseline {
    pub profiles: BTreeMap<String, BaselineEntry>,
}

impl Baseline {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("baseline serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn record(&mut self, r: &BenchReport) {
        self.profiles.insert(
            r.profile.clone(),
            BaselineEntry {
                p50_ms: r.p50_ms,
                p95_ms: r.p95_ms,
                frames: r.frames,
                context_cap: r.context_cap,
            },
        );
    }

    pub fn check(&self, r: &BenchReport) -> Option<GuardResult> {
        let b = self.profiles.get(&r.profile)?;
        let ratio = r.p50_ms / b.p50_ms;
        Some(GuardResult {
            baseline_p50_ms: b.p50_ms,
            ratio,
            tolerance: TOLERANCE,
            pass: (ratio - 1.0).abs() <= TOLERANCE,
        })
    }
}

/// `os-arch-Ncpu-model`, with the CPU model from `/proc/cpuinfo` when
/// available.
pub fn machine_profile() -> String {
    let cpus = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown".into());
    let model: String = model
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '-'
            }
        })
        .collect::<String>()
        .split('-')
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join("-");
    format!(
        "{}-{}-{cpus}cpu-{model}",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

/// Nearest-rank percentile of sorted values.
pub fn percentile(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn synthetic_inputs(
    cfg: &EngineConfig,
    frames: usize,
    seed: u64,
) -> (SessionInit, Vec<FrameInput>) {
    let mut r = Rng::seeded(seed);
    let mut v = |n: usize| -> Vec<f32> { (0..n).map(|_| r.uniform(-1.0, 1.0) as f32).collect() };
    let init = SessionInit {
        reference_motion: MotionVector::new(v(cfg.motion_dim), cfg.motion_dim).expect("sized"),
        first_audio: v(cfg.audio_dim),
        seed,
    };
    let records: Vec<FrameRecord> = (0..frames)
        .map(|t| FrameRecord {
            agent_audio: v(cfg.audio_dim),
            agent_energy: if (t / 50) % 2 == 0 { 0.4 } else { 0.0 },
            user_audio: v(cfg.audio_dim),
            user_motion: v(cfg.motion_dim),
            user_energy: if (t / 35) % 2 == 1 { 0.4 } else { 0.0 },
        })
        .collect();
    let inputs = lagged_inputs(&records, &init);
    (init, inputs)
}

pub fn run(opts: &BenchOptions) -> Result<BenchReport> {
    if opts.frames == 0 {
        return Err(Error::Usage("bench needs at least one frame".into()));
    }
    let mut cfg = opts.config.clone();
    cfg.context = opts.context_cap;
    let model = Model::init(&cfg, opts.seed, InitMode::Random)?.shared();
    let (init, inputs) = synthetic_inputs(&cfg, opts.warmup + opts.frames, opts.seed);
    let mut session = Session::new(model, init)?;
    let clock = InstantClock::new();
    for i in &inputs[..opts.warmup] {
        session.step_with_clock(i, &clock)?;
    }
    let mut lat = Vec::with_capacity(opts.frames);
    let mut sums = [0u64; 4];
    let mut exact = true;
    let start = Instant::now();
    for i in &inputs[opts.warmup..] {
        let o = session.step_with_clock(i, &clock)?;
        let s = o.stages;
        exact &= s.total() == o.latency_micros;
        for (acc, v) in sums.iter_mut().zip([s.ibu, s.csu, s.pmp, s.sampler]) {
            *acc += v;
        }
        lat.push(o.latency_micros);
    }
    let wall = start.elapsed().as_secs_f64();
    let n = opts.frames as f64;
    let mean_ms = lat.iter().sum::<u64>() as f64 / n / 1000.0;
    lat.sort_unstable();
    let ms = |us: u64| us as f64 / 1000.0;
    let p50_ms = ms(percentile(&lat, 50.0));
    let budget_ms = cfg.frame_budget_ms();
    Ok(BenchReport {
        profile: machine_profile(),
        frames: opts.frames,
        context_cap: opts.context_cap,
        p50_ms,
        p95_ms: ms(percentile(&lat, 95.0)),
        max_ms: ms(*lat.last().expect("frames > 0")),
        mean_ms,
        fps: n / wall,
        wall_s: wall,
        stages_ms: StageMeans {
            ibu: sums[0] as f64 / n / 1000.0,
            csu: sums[1] as f64 / n / 1000.0,
            pmp: sums[2] as f64 / n / 1000.0,
            sampler: sums[3] as f64 / n / 1000.0,
        },
        stages_sum_exact: exact,
        budget_ms,
        within_budget: p50_ms <= budget_ms,
        guard: None,
    })
}
