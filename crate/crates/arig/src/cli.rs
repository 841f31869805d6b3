//! The `arig` command line.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use arig_core::diffusion::DiffusionDims;
use arig_core::engine::{read_snapshot_header, SNAPSHOT_MAGIC};
use arig_core::train::{gradcheck, train_toy, ToyConfig};
use arig_core::{EngineConfig, InitMode, Model, Session};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bench::{self, Baseline, BenchOptions};
use crate::error::{Error, Result};
use crate::formats::{annotations, read_file, stream, weights, write_file};
use crate::gateway::{self, DriveOptions, Encoding, Pace, Server, ServerOptions};
use crate::trace::TraceWriter;

/// `writeln!` to standard output, as a [`Result`].
macro_rules! outln {
    ($out:expr, $($arg:tt)*) => {
        writeln!($out, $($arg)*).map_err(|e| Error::io("standard output", e))?
    };
}

#[derive(Debug, Parser)]
#[command(
    name = "arig",
    version,
    about = "Frame-wise autoregressive head motion for two-party conversation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an interaction stream through the engine and write one JSON record per frame.
    Run(RunArgs),
    /// Measure per-frame latency at a given context cap.
    Bench(BenchArgs),
    /// Serve sessions over TCP (newline-delimited JSON).
    Serve(ServeArgs),
    /// Replay an interaction stream against a running server.
    Drive(DriveArgs),
    /// Write freshly initialized weights for a configuration.
    Init(InitArgs),
    /// Train the denoiser on the synthetic conditional Gaussian task.
    TrainDiffmlp(TrainArgs),
    /// Compare analytic and numeric gradients of the denoiser in f64.
    Gradcheck(GradcheckArgs),
    /// Generate an interaction stream and state annotations from a turn script.
    Synth(SynthArgs),
    /// Describe a weights, stream or snapshot file.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    Full,
    Small,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Engine configuration file (key = value lines).
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in configuration.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<EngineConfig> {
        match (&self.config, self.preset) {
            (Some(p), _) => crate::config::load(p),
            (None, Some(Preset::Small)) => Ok(EngineConfig::small()),
            (None, _) => Ok(EngineConfig::default()),
        }
    }
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Weights file.
    #[arg(long, required_unless_present = "random_weights")]
    pub weights: Option<PathBuf>,
    /// Use randomly initialized weights from this seed instead of a file.
    #[arg(long, conflicts_with = "weights")]
    pub random_weights: Option<u64>,
}

impl ModelArgs {
    pub fn load(&self) -> Result<(EngineConfig, Arc<Model>)> {
        let cfg = self.config.resolve()?;
        let model = match (&self.weights, self.random_weights) {
            (Some(p), _) => weights::load_model(p, &cfg)?,
            (None, Some(seed)) => Model::init(&cfg, seed, InitMode::Random)?,
            (None, None) => {
                return Err(Error::Usage(
                    "either --weights or --random-weights is required".into(),
                ))
            }
        };
        Ok((cfg, model.shared()))
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Interaction stream file.
    #[arg(long)]
    pub stream: PathBuf,
    /// Sampling seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file for the per-frame records; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Keep only this many leading motion coordinates in each record.
    #[arg(long)]
    pub motion_dims: Option<usize>,
    /// Continue from a snapshot instead of starting at frame 0.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many frames.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Write a snapshot of the session after the last frame.
    #[arg(long)]
    pub save_snapshot: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value_t = 500)]
    pub frames: usize,
    #[arg(long, default_value_t = 64)]
    pub context_cap: usize,
    #[arg(long, default_value_t = 20)]
    pub warmup: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Report file (JSON).
    #[arg(long, default_value = "bench_report.json")]
    pub out: PathBuf,
    /// Baseline file keyed by machine profile.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Record this run as the baseline for the current machine profile.
    #[arg(long, requires = "baseline")]
    pub update_baseline: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 7878)]
    pub port: u16,
    /// Inputs a connection may queue before it is closed.
    #[arg(long, default_value_t = 8)]
    pub queue_depth: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum WireEncoding {
    Json,
    Base64,
}

#[derive(Debug, Args)]
pub struct DriveArgs {
    /// Interaction stream file.
    #[arg(long)]
    pub stream: PathBuf,
    /// Server address.
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub addr: String,
    /// Send frames as fast as acknowledgements allow instead of every 40 ms.
    #[arg(long)]
    pub firehose: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = WireEncoding::Json)]
    pub encoding: WireEncoding,
    #[arg(long)]
    pub motion_dims: Option<usize>,
    /// Transcript file for the server's messages.
    #[arg(long)]
    pub transcript: Option<PathBuf>,
    /// Zero the timing fields in the written transcript.
    #[arg(long)]
    pub masked: bool,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random weights everywhere; otherwise the standard zero-gated initialization.
    #[arg(long)]
    pub random: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Dimension of the denoised vector.
    #[arg(long, default_value_t = 4)]
    pub dim: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Write the trained denoiser weights here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the per-step loss curve here, one value per line.
    #[arg(long)]
    pub losses: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Turn script (JSON).
    #[arg(long)]
    pub script: PathBuf,
    /// Output stream file.
    #[arg(long)]
    pub out: PathBuf,
    /// Output state annotation file.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct InspectArgs {
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub stream: Option<PathBuf>,
    #[arg(long)]
    pub snapshot: Option<PathBuf>,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::BrokenPipe => 0,
        Err(e) => {
            eprintln!("arig: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Run(a) => run(a),
        Command::Bench(a) => bench(a),
        Command::Serve(a) => serve(a),
        Command::Drive(a) => drive(a),
        Command::Init(a) => init(a),
        Command::TrainDiffmlp(a) => train(a),
        Command::Gradcheck(a) => grad(a),
        Command::Synth(a) => synth(a),
        Command::Inspect(a) => inspect(a),
    }
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn run(a: RunArgs) -> Result<i32> {
    let (cfg, model) = a.model.load()?;
    let file = stream::StreamFile::load(&a.stream)?;
    let (init, inputs) = file.session_inputs(&cfg, a.seed)?;
    let mut session = match &a.resume {
        Some(p) => Session::restore(Arc::clone(&model), &read_file(p)?)?,
        None => Session::new(Arc::clone(&model), init)?,
    };
    let start = session.frame() as usize;
    if start > inputs.len() {
        return Err(Error::format(format!(
            "snapshot is at frame {start} but the stream has {} frames",
            inputs.len()
        )));
    }
    let end = a
        .frames
        .map_or(inputs.len(), |n| (start + n).min(inputs.len()));
    let out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(std::io::BufWriter::new(std::io::stdout().lock())),
    };
    let mut trace = TraceWriter::new(out);
    let clock = bench::InstantClock::new();
    let mut latencies = Vec::with_capacity(end - start);
    for input in &inputs[start..end] {
        let o = session.step_with_clock(input, &clock)?;
        latencies.push(o.latency_micros);
        trace.write_with(&o, a.motion_dims)?;
    }
    trace.finish()?;
    if let Some(p) = &a.save_snapshot {
        write_file(p, &session.snapshot()?)?;
    }
    latencies.sort_unstable();
    eprintln!(
        "arig: {} frames ({}..{}), p50 {:.2} ms, p95 {:.2} ms",
        end - start,
        start,
        end,
        bench::percentile(&latencies, 50.0) as f64 / 1000.0,
        bench::percentile(&latencies, 95.0) as f64 / 1000.0
    );
    Ok(0)
}

fn bench(a: BenchArgs) -> Result<i32> {
    let opts = BenchOptions {
        config: a.config.resolve()?,
        frames: a.frames,
        context_cap: a.context_cap,
        warmup: a.warmup,
        seed: a.seed,
    };
    let mut report = bench::run(&opts)?;
    let mut baseline = match &a.baseline {
        Some(p) if p.exists() => Some(Baseline::load(p)?),
        Some(_) => Some(Baseline::default()),
        None => None,
    };
    if let Some(b) = &baseline {
        report.guard = b.check(&report);
    }
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    std::fs::write(&a.out, text).map_err(|e| Error::io(&a.out, e))?;
    let s = &report.stages_ms;
    eprintln!(
        "arig: {} frames at context {}: p50 {:.2} ms, p95 {:.2} ms, {:.1} fps (ibu {:.2}, csu {:.2}, pmp {:.2}, sampler {:.2} ms)",
        report.frames, report.context_cap, report.p50_ms, report.p95_ms, report.fps, s.ibu, s.csu, s.pmp, s.sampler
    );
    eprintln!(
        "arig: p50 {} the {:.0} ms frame budget",
        if report.within_budget {
            "within"
        } else {
            "over"
        },
        report.budget_ms
    );
    let mut ok = report.stages_sum_exact;
    if !ok {
        eprintln!("arig: stage times do not add up to the frame latency");
    }
    match (&report.guard, a.update_baseline) {
        (_, true) => {
            let (b, path) = (
                baseline.get_or_insert_with(Baseline::default),
                a.baseline.as_ref().expect("required"),
            );
            b.record(&report);
            b.save(path)?;
            eprintln!(
                "arig: baseline for {} updated in {}",
                report.profile,
                path.display()
            );
        }
        (Some(g), false) => {
            eprintln!(
                "arig: p50 is {:.2}x the baseline {:.2} ms (allowed ±{:.0}%): {}",
                g.ratio,
                g.baseline_p50_ms,
                g.tolerance * 100.0,
                if g.pass { "ok" } else { "REGRESSION" }
            );
            ok &= g.pass;
        }
        (None, false) if a.baseline.is_some() => {
            eprintln!("arig: no baseline recorded for profile {}", report.profile);
        }
        (None, false) => {}
    }
    Ok(if ok { 0 } else { 2 })
}

fn serve(a: ServeArgs) -> Result<i32> {
    let (_, model) = a.model.load()?;
    let server = Server::bind(
        (a.host.as_str(), a.port),
        model,
        ServerOptions {
            queue_depth: a.queue_depth,
        },
    )?;
    eprintln!("arig: listening on {}", server.local_addr());
    server.serve(Arc::new(AtomicBool::new(false)))?;
    Ok(0)
}

fn drive(a: DriveArgs) -> Result<i32> {
    let file = stream::StreamFile::load(&a.stream)?;
    let opts = DriveOptions {
        pace: if a.firehose {
            Pace::Firehose
        } else {
            Pace::RealTime
        },
        encoding: match a.encoding {
            WireEncoding::Json => Encoding::Json,
            WireEncoding::Base64 => Encoding::Base64,
        },
        seed: a.seed,
        motion_dims: a.motion_dims,
        ..Default::default()
    };
    let report = gateway::drive_stream(a.addr.as_str(), &file, &opts)?;
    if let Some(p) = &a.transcript {
        let text = if a.masked {
            gateway::transcript::mask(&report.transcript)
        } else {
            report.transcript.iter().map(|l| l.clone() + "\n").collect()
        };
        std::fs::write(p, text).map_err(|e| Error::io(p, e))?;
    }
    eprintln!(
        "arig: {} frames sent, {} frame_out, {} errors, end-to-end p50 {:.2} ms, p95 {:.2} ms, digest {}",
        report.frames_sent,
        report.frame_outs,
        report.errors,
        report.p50_ms,
        report.p95_ms,
        gateway::transcript::digest(&report.transcript)
    );
    match &report.failure {
        Some(f) => {
            eprintln!("arig: {f}");
            Ok(2)
        }
        None if !report.complete => Ok(2),
        None => Ok(0),
    }
}

fn init(a: InitArgs) -> Result<i32> {
    let cfg = a.config.resolve()?;
    let mode = if a.random {
        InitMode::Random
    } else {
        InitMode::Standard
    };
    let w = arig_core::Weights::init(&cfg, a.seed, mode)?;
    weights::save(&w, &a.out)?;
    eprintln!("arig: wrote {} tensors to {}", w.len(), a.out.display());
    Ok(0)
}

fn train(a: TrainArgs) -> Result<i32> {
    let mut out = std::io::stdout().lock();
    let mut cfg = ToyConfig {
        steps: a.steps,
        seed: a.seed,
        lr: a.lr,
        ..Default::default()
    };
    cfg.dims.data = a.dim;
    cfg.smoothing = cfg.smoothing.min((a.steps / 4).max(1));
    let report = train_toy(&cfg)?;
    if let Some(p) = &a.losses {
        let text: String = report.losses.iter().map(|l| format!("{l}\n")).collect();
        std::fs::write(p, text).map_err(|e| Error::io(p, e))?;
    }
    if let Some(p) = &a.out {
        weights::save(&report.model.to_weights()?, p)?;
    }
    outln!(
        out,
        "smoothed loss {:.5} -> {:.5} (ratio {:.3}), max sample-mean error {:.4}",
        report.initial_smoothed,
        report.final_smoothed,
        report.loss_ratio(),
        report.max_mean_error()
    );
    for (k, (t, m)) in report.targets.iter().zip(&report.sample_means).enumerate() {
        let fmt = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:+.3}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        outln!(out, "class {k}: target [{}] sampled [{}]", fmt(t), fmt(m));
    }
    Ok(0)
}

fn grad(a: GradcheckArgs) -> Result<i32> {
    let mut out = std::io::stdout().lock();
    let dims = DiffusionDims {
        data: a.dim,
        cond: a.dim,
        width: a.dim,
        hidden: a.dim,
        time: a.dim,
        blocks: 3,
    };
    let checks = gradcheck(&dims, 4, 1e-5, a.seed)?;
    let mut worst: f64 = 0.0;
    for c in &checks {
        worst = worst.max(c.rel_error);
        outln!(
            out,
            "{:<32} {:>6} params  rel error {:.3e}",
            c.name,
            c.params,
            c.rel_error
        );
    }
    outln!(
        out,
        "max relative error {worst:.3e} (tolerance {:.0e})",
        a.tolerance
    );
    Ok(if worst <= a.tolerance { 0 } else { 2 })
}

fn synth(a: SynthArgs) -> Result<i32> {
    let cfg = a.config.resolve()?;
    let script = crate::synth::Script::load(&a.script)?;
    let s = crate::synth::generate(&script, &cfg)?;
    let file =
        stream::StreamFile::interaction(s.fps, crate::synth::EXTRACTOR, &s.reference, &s.records)?;
    file.save(&a.out)?;
    if let Some(p) = &a.annotations {
        annotations::save(&s.annotations, p)?;
    }
    eprintln!("arig: {} frames at {} fps", s.records.len(), s.fps);
    Ok(0)
}

fn inspect(a: InspectArgs) -> Result<i32> {
    let mut out = std::io::stdout().lock();
    if let Some(p) = &a.weights {
        let (w, entries) = weights::decode(&read_file(p)?)?;
        let total: usize = w.iter().map(|(_, t)| t.data().len()).sum();
        outln!(
            out,
            "weights: {} tensors, {total} parameters",
            entries.len()
        );
        for e in &entries {
            let dims: Vec<String> = e.dims.iter().map(|d| d.to_string()).collect();
            outln!(
                out,
                "  {:<40} [{}] at byte {}",
                e.name,
                dims.join(", "),
                e.offset
            );
        }
    } else if let Some(p) = &a.stream {
        let info = stream::inspect(&read_file(p)?)?;
        let h = &info.header;
        outln!(
            out,
            "stream: {} frames at {} fps, {} bytes, extractor {:?}, reference of {} values",
            info.frames,
            h.fps,
            info.bytes,
            h.extractor,
            h.reference.len()
        );
        for t in &h.tracks {
            outln!(
                out,
                "  {:?} track: audio {} motion {} energy {}",
                t.role,
                t.audio_dim,
                t.motion_dim,
                t.energy
            );
        }
    } else if let Some(p) = &a.snapshot {
        let bytes = read_file(p)?;
        if bytes.get(..4) != Some(&SNAPSHOT_MAGIC[..]) {
            return Err(Error::format(format!(
                "{}: not a snapshot file",
                p.display()
            )));
        }
        let h = read_snapshot_header(&bytes)?;
        outln!(
            out,
            "snapshot v{}: frame {}, state {}, seed {}, poisoned {}",
            h.version,
            h.frame,
            h.state.name(),
            h.seed,
            h.poisoned
        );
        outln!(
            out,
            "  chunk {} context {} audio {} motion {} d_model {} windows audio {} temporal {} vad {}",
            h.chunk, h.context, h.audio_dim, h.motion_dim, h.d_model, h.audio_window, h.temporal_window, h.vad_window
        );
        for (tag, len) in h.sections {
            outln!(
                out,
                "  section {} {len} bytes",
                String::from_utf8_lossy(&tag)
            );
        }
    }
    Ok(0)
}
