//! Acceptance suite. Runs every criterion in order and prints one
//! `PASS`/`FAIL` line per criterion; exits nonzero if any fails.
//!
//! `cargo test -p arig --test acceptance -- <filter>` runs only the
//! criteria whose name contains `<filter>`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use arig::bench::{self, Baseline, BenchOptions};
use arig::core::caches::{chunk_index, ChunkSummary, ContextCache, Upsert};
use arig::core::csu::{
    coarse_category, coarse_consistency, state_ce_loss, vad_trace, CoarseState, FineState,
    NUM_STATES,
};
use arig::core::diffusion::{sample, DiffusionDims, GaussianOracle, NoiseSchedule};
use arig::core::engine::{
    lagged_inputs, run_full_prefix, FrameOutput, FrameRecord, Session, SessionInit,
};
use arig::core::rng::Rng;
use arig::core::train::{gradcheck, train_toy, ToyConfig};
use arig::core::weights::{topology, Weights};
use arig::core::{EngineConfig, FrameInput, InitMode, Model, MotionVector};
use arig::gateway::{
    drive_lines, stream_lines, transcript, DriveOptions, Pace, Server, ServerOptions,
};
use arig::synth::{generate, Script};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn random_vec(r: &mut Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| r.uniform(-1.0, 1.0) as f32).collect()
}

fn init(cfg: &EngineConfig, seed: u64) -> SessionInit {
    let mut r = Rng::seeded(seed ^ 0xacce);
    SessionInit {
        reference_motion: MotionVector::new(random_vec(&mut r, cfg.motion_dim), cfg.motion_dim)
            .unwrap(),
        first_audio: random_vec(&mut r, cfg.audio_dim),
        seed,
    }
}

fn records(cfg: &EngineConfig, frames: usize, seed: u64) -> Vec<FrameRecord> {
    let mut r = Rng::seeded(seed);
    (0..frames)
        .map(|t| FrameRecord {
            agent_audio: random_vec(&mut r, cfg.audio_dim),
            agent_energy: if (t / 13) % 2 == 0 { 0.4 } else { 0.01 },
            user_audio: random_vec(&mut r, cfg.audio_dim),
            user_motion: random_vec(&mut r, cfg.motion_dim),
            user_energy: if (t / 19) % 2 == 1 { 0.3 } else { 0.02 },
        })
        .collect()
}

fn random_model(cfg: &EngineConfig, seed: u64) -> Arc<Model> {
    Model::init(cfg, seed, InitMode::Random).unwrap().shared()
}

/// Small widths with the full-size chunk of 6 frames.
fn chunked_small() -> EngineConfig {
    EngineConfig {
        chunk: 6,
        ..EngineConfig::small()
    }
}

fn equivalence() -> Outcome {
    let start = Instant::now();
    let mut checked = Vec::new();
    for (name, cfg) in [
        ("small", EngineConfig::small()),
        ("chunk6", chunked_small()),
    ] {
        let mut cfg = cfg;
        cfg.context = 16;
        let model = random_model(&cfg, 11);
        let init = init(&cfg, 3);
        let mut inputs = lagged_inputs(&records(&cfg, 200, 3), &init);
        inputs[57].agent_motion = Some(vec![0.25; cfg.motion_dim]);
        inputs[90].agent_vad = Some(true);
        inputs[91].user_vad = Some(false);
        let fast = Session::new(model.clone(), init.clone())
            .unwrap()
            .run_stream(&inputs)
            .unwrap();
        let slow = run_full_prefix(&model, &init, &inputs).unwrap();
        ensure!(
            fast.len() == 200 && slow.len() == 200,
            "{name}: {} vs {} frames",
            fast.len(),
            slow.len()
        );
        if let Some(t) = fast.iter().zip(&slow).position(|(a, b)| a != b) {
            return Err(format!("{name}: first mismatch at frame {t}"));
        }
        checked.push(name);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1} s");
    Ok(format!("200 frames bit-identical ({})", checked.join(", ")))
}

fn perturb(r: &mut Rng, v: &mut [f32]) {
    for x in v {
        *x += r.uniform(-0.5, 0.5) as f32;
    }
}

fn causality() -> Outcome {
    let cfg = EngineConfig::small();
    let model = random_model(&cfg, 21);
    let init = init(&cfg, 8);
    let frames = 40;
    let base_records = records(&cfg, frames, 8);
    let base = Session::new(model.clone(), init.clone())
        .unwrap()
        .run_stream(&lagged_inputs(&base_records, &init))
        .unwrap();
    let mut r = Rng::seeded(2024);
    let mut changed_tail = 0;
    for trial in 0..50 {
        let t = r.below(frames - 1);
        let mut recs = base_records.clone();
        perturb(&mut r, &mut recs[t].user_audio);
        perturb(&mut r, &mut recs[t].user_motion);
        recs[t].user_energy = r.uniform(0.0, 1.0) as f32;
        for rec in &mut recs[t + 1..] {
            perturb(&mut r, &mut rec.agent_audio);
            perturb(&mut r, &mut rec.user_audio);
            perturb(&mut r, &mut rec.user_motion);
            rec.agent_energy = r.uniform(0.0, 1.0) as f32;
            rec.user_energy = r.uniform(0.0, 1.0) as f32;
        }
        let mut inputs = lagged_inputs(&recs, &init);
        for i in &mut inputs[t + 1..] {
            i.agent_motion = Some(random_vec(&mut r, cfg.motion_dim));
        }
        let out = Session::new(model.clone(), init.clone())
            .unwrap()
            .run_stream(&inputs)
            .unwrap();
        ensure!(
            out[..=t] == base[..=t],
            "trial {trial}: outputs up to T={t} changed"
        );
        if out[frames - 1] != base[frames - 1] {
            changed_tail += 1;
        }
    }
    ensure!(
        changed_tail == 50,
        "perturbations reached the last frame in only {changed_tail} of 50 trials"
    );
    Ok("50 trials, prefix bit-identical, every perturbation visible later".into())
}

fn ddpm_oracle() -> Outcome {
    let schedule = NoiseSchedule::build(1000, 1e-4, 0.02, 15).unwrap();
    let mean: Vec<f64> = (0..8).map(|i| -0.7 + 0.2 * i as f64).collect();
    let std = 0.9;
    let oracle = GaussianOracle {
        schedule: &schedule,
        mean: mean.clone(),
        std,
    };
    let n = 10_000;
    let start = Instant::now();
    let mut sum = [0.0f64; 8];
    let mut sq = [0.0f64; 8];
    for i in 0..n {
        let s = sample::<f64, _>(&oracle, &schedule, &[], &mut Rng::for_frame(99, i)).unwrap();
        ensure!(s.evals == 15, "{} estimator calls", s.evals);
        for (j, x) in s.x.iter().enumerate() {
            sum[j] += x;
            sq[j] += x * x;
        }
    }
    let mut worst_mean: f64 = 0.0;
    let mut worst_var: f64 = 0.0;
    for j in 0..8 {
        let m = sum[j] / n as f64;
        let v = sq[j] / n as f64 - m * m;
        worst_mean = worst_mean.max((m - mean[j]).abs());
        worst_var = worst_var.max((v / (std * std) - 1.0).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 30.0, "took {secs:.1} s");
    ensure!(worst_mean <= 0.05, "mean error {worst_mean:.4}");
    ensure!(
        worst_var <= 0.10,
        "variance error {:.1}%",
        worst_var * 100.0
    );
    Ok(format!(
        "mean error {worst_mean:.4}, variance error {:.2}%",
        worst_var * 100.0
    ))
}

fn gradient_check() -> Outcome {
    let dims = DiffusionDims {
        data: 8,
        cond: 8,
        width: 8,
        hidden: 8,
        time: 8,
        blocks: 3,
    };
    let checks = gradcheck(&dims, 4, 1e-5, 17).map_err(|e| e.to_string())?;
    ensure!(!checks.is_empty(), "no tensors checked");
    let worst = checks
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        .unwrap();
    ensure!(
        worst.rel_error <= 1e-4,
        "{} relative error {:.3e}",
        worst.name,
        worst.rel_error
    );
    Ok(format!(
        "{} tensors, worst {} at {:.2e}",
        checks.len(),
        worst.name,
        worst.rel_error
    ))
}

fn toy_training() -> Outcome {
    let cfg = ToyConfig::default();
    let a = train_toy(&cfg).map_err(|e| e.to_string())?;
    ensure!(a.losses.len() == 2000, "{} steps", a.losses.len());
    let ratio = a.loss_ratio();
    ensure!(ratio <= 0.5, "smoothed loss ratio {ratio:.3}");
    let err = a.max_mean_error();
    ensure!(err <= 0.1, "sample mean error {err:.4}");
    let b = train_toy(&cfg).map_err(|e| e.to_string())?;
    ensure!(a.losses == b.losses, "second run diverged");
    Ok(format!(
        "loss ratio {ratio:.3}, mean error {err:.4}, deterministic"
    ))
}

fn cache_suite() -> Outcome {
    let table = [0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 2];
    for (t, &k) in table.iter().enumerate() {
        ensure!(
            chunk_index(t as u64, 6).unwrap() == k,
            "chunk_index({t}, 6)"
        );
    }
    ensure!(chunk_index(3072, 6).unwrap() == 512, "chunk_index(3072, 6)");

    let cap = 4;
    let mut ctx = ContextCache::new(cap).unwrap();
    let mut evicted = 0;
    for t in 0..60u64 {
        let k = t / 6;
        let u = ctx
            .upsert(ChunkSummary {
                chunk_index: k,
                vector: vec![t as f32],
                complete: (t + 1) % 6 == 0,
            })
            .unwrap();
        let expected = if t % 6 != 0 {
            Upsert::Refreshed
        } else if k < cap as u64 {
            Upsert::Appended
        } else {
            Upsert::Evicted
        };
        ensure!(u == expected, "frame {t}: {u:?}, expected {expected:?}");
        evicted += (u == Upsert::Evicted) as usize;
        let ks: Vec<u64> = ctx.entries().map(|e| e.chunk_index).collect();
        let lo = k.saturating_sub(cap as u64 - 1);
        ensure!(
            ks == (lo..=k).collect::<Vec<_>>(),
            "frame {t}: window {ks:?}"
        );
        ensure!(
            ctx.newest().map(|e| e.vector[0]) == Some(t as f32),
            "frame {t}: newest not refreshed"
        );
    }

    let mut cfg = EngineConfig::small();
    cfg.context = 4;
    let model = random_model(&cfg, 1);
    let init = init(&cfg, 1);
    let fill = cfg.chunk * (cfg.context + 1);
    let mut s = Session::new(model.clone(), init.clone()).unwrap();
    let mut r = Rng::seeded(5);
    let mut at_fill = 0;
    let mut peak = 0;
    let frames = 100_000;
    let mut prev = FrameRecord {
        agent_audio: init.first_audio.clone(),
        agent_energy: 0.0,
        user_audio: init.first_audio.clone(),
        user_motion: init.reference_motion.as_slice().to_vec(),
        user_energy: 0.0,
    };
    for t in 0..frames {
        let rec = FrameRecord {
            agent_audio: random_vec(&mut r, cfg.audio_dim),
            agent_energy: if (t / 40) % 2 == 0 { 0.4 } else { 0.0 },
            user_audio: random_vec(&mut r, cfg.audio_dim),
            user_motion: random_vec(&mut r, cfg.motion_dim),
            user_energy: if (t / 29) % 2 == 0 { 0.0 } else { 0.3 },
        };
        let input = FrameInput {
            frame_index: t as u64,
            agent_audio: rec.agent_audio.clone(),
            user_audio: prev.user_audio.clone(),
            user_motion: prev.user_motion.clone(),
            agent_energy: rec.agent_energy,
            user_energy: prev.user_energy,
            agent_motion: None,
            agent_vad: None,
            user_vad: None,
        };
        prev = rec;
        s.step(&input).map_err(|e| format!("frame {t}: {e}"))?;
        let bytes = s.caches().heap_bytes();
        if t == fill {
            at_fill = bytes;
        } else if t > fill {
            peak = peak.max(bytes);
        }
    }
    ensure!(peak <= at_fill, "cache bytes grew from {at_fill} to {peak}");
    ensure!(
        s.caches().context.len() == cfg.context,
        "context holds {}",
        s.caches().context.len()
    );
    ensure!(
        s.caches().agent.len() == cfg.chunk,
        "agent chunk cache holds {}",
        s.caches().agent.len()
    );

    let bytes = s.snapshot().unwrap();
    let back = Session::restore(model.clone(), &bytes).unwrap();
    ensure!(back == s, "restored session differs");
    ensure!(back.snapshot().unwrap() == bytes, "re-snapshot differs");
    let mut fresh = Session::new(model, init).unwrap();
    for t in 0..30 {
        let bytes = fresh.snapshot().unwrap();
        let back = Session::restore(fresh.model().clone(), &bytes).unwrap();
        ensure!(
            back == fresh && back.snapshot().unwrap() == bytes,
            "snapshot at frame {t} not bijective"
        );
        fresh
            .step(&FrameInput {
                frame_index: t,
                agent_audio: vec![0.1; cfg.audio_dim],
                user_audio: vec![-0.1; cfg.audio_dim],
                user_motion: vec![0.5; cfg.motion_dim],
                agent_energy: 0.3,
                user_energy: 0.0,
                agent_motion: None,
                agent_vad: None,
                user_vad: None,
            })
            .unwrap();
    }
    Ok(format!(
        "FIFO eviction {evicted}x, cache bytes {at_fill} flat over {frames} frames, snapshots bijective"
    ))
}

fn structural_constants() -> Outcome {
    let cfg = EngineConfig::default();
    let consts = [
        ("chunk", cfg.chunk, 6),
        ("context", cfg.context, 512),
        ("heads", cfg.heads, 6),
        ("bidir_depth", cfg.bidir_depth, 2),
        ("audio_window", cfg.audio_window, 3),
        ("temporal_window", cfg.temporal_window, 5),
        ("diffmlp_blocks", cfg.diffmlp_blocks, 3),
        ("inference_steps", cfg.inference_steps, 15),
        ("audio_dim", cfg.audio_dim, 768),
        ("motion_dim", cfg.motion_dim, 262),
        ("d_model", cfg.d_model, 512),
        ("d_ff", cfg.d_ff, 2048),
    ];
    for (name, got, want) in consts {
        ensure!(got == want, "{name} = {got}, expected {want}");
    }
    cfg.validate().map_err(|e| e.to_string())?;

    let specs = topology(&cfg).map_err(|e| e.to_string())?;
    let shape = |name: &str| specs.iter().find(|s| s.name == name).map(|s| s.shape);
    let has_prefix = |p: &str| specs.iter().any(|s| s.name.starts_with(p));
    for p in [
        "ibu.bidir.0.agent.",
        "ibu.bidir.0.user.",
        "ibu.bidir.1.agent.",
        "ibu.bidir.1.user.",
        "ibu.integ.0.",
        "ibu.ctx.0.",
        "ibu.ctx.1.",
        "ibu.ctx.pos",
        "ibu.ctx.ln_out.",
        "ibu.merge.agent.",
        "ibu.merge.user.",
        "diffmlp.block0.",
        "diffmlp.block1.",
        "diffmlp.block2.",
        "diffmlp.final",
        "csu.attn.q.",
        "csu.state_embed",
        "csu.head.",
        "pmp.coarse.",
        "pmp.fine.",
        "pmp.temporal",
    ] {
        ensure!(has_prefix(p), "no parameter under {p}");
    }
    for p in ["ibu.bidir.2.", "ibu.ctx.2.", "diffmlp.block3."] {
        ensure!(!has_prefix(p), "unexpected parameters under {p}");
    }
    ensure!(
        specs
            .iter()
            .any(|s| s.name.starts_with("pmp.fine.") && s.name.contains("gate_attn"))
            && specs
                .iter()
                .any(|s| s.name.starts_with("pmp.fine.") && s.name.contains("gate_ff")),
        "fine-grained motion block has no gates"
    );
    ensure!(
        shape("ibu.audio_embed.w") == Some((768, 512)),
        "audio embedding {:?}",
        shape("ibu.audio_embed.w")
    );
    ensure!(
        shape("csu.head.w") == Some((512, NUM_STATES)),
        "state head {:?}",
        shape("csu.head.w")
    );
    ensure!(
        shape("diffmlp.out.w") == Some((262, 262)),
        "denoiser output {:?}",
        shape("diffmlp.out.w")
    );
    ensure!(
        shape("csu.ff1.w") == Some((512, 2048)),
        "feed-forward {:?}",
        shape("csu.ff1.w")
    );

    let small = EngineConfig::small();
    let model = random_model(&small, 3);
    let init = init(&small, 3);
    let out = Session::new(model, init.clone())
        .unwrap()
        .run_stream(&lagged_inputs(&records(&small, 12, 3), &init))
        .unwrap();
    ensure!(
        out.iter().all(|o| o.denoiser_evals == 15),
        "denoiser evals {:?}",
        out.iter().map(|o| o.denoiser_evals).collect::<Vec<_>>()
    );
    Ok(format!(
        "{} parameter tensors, 15 denoiser evaluations per frame",
        specs.len()
    ))
}

fn set(w: &mut Weights, name: &str, f: impl Fn(usize, usize) -> f32) {
    let t = w
        .get_mut(name)
        .unwrap_or_else(|| panic!("no tensor {name}"));
    let cols = t.cols();
    for (i, x) in t.data_mut().iter_mut().enumerate() {
        *x = f(i / cols, i % cols);
    }
}

/// Random weights with the state unit wired so that its prediction follows
/// the coarse VAD category exactly.
fn scripted_state_model(cfg: &EngineConfig) -> Arc<Model> {
    let mut w = Weights::init(cfg, 31, InitMode::Random).unwrap();
    let zero = |_: usize, _: usize| 0.0;
    let eye4 = |i: usize, j: usize| if i == j && i < 4 { 1.0 } else { 0.0 };
    for n in [
        "ibu.ctx.ln_out.g",
        "ibu.ctx.ln_out.b",
        "csu.state_embed",
        "csu.attn.q.w",
        "csu.attn.q.b",
        "csu.attn.v.b",
        "csu.attn.o.b",
        "csu.ff2.w",
        "csu.ff2.b",
        "csu.ln_kv.b",
    ] {
        set(&mut w, n, zero);
    }
    set(&mut w, "csu.ln_kv.g", |_, _| 1.0);
    set(&mut w, "csu.attn.v.w", eye4);
    set(&mut w, "csu.attn.o.w", eye4);
    set(&mut w, "csu.vad_agent", |r, c| match (r, c) {
        (0, 0) | (1, 1) => 1.0,
        (0, 1) | (1, 0) => -1.0,
        _ => 0.0,
    });
    set(&mut w, "csu.vad_user", |r, c| match (r, c) {
        (0, 2) | (1, 3) => 1.0,
        (0, 3) | (1, 2) => -1.0,
        _ => 0.0,
    });
    // Columns: speaking = a - u, feedback = a + u, listening = u - a,
    // pause = -a - u, with a = s1 - s0 and u = s3 - s2.
    let signs: [(usize, f32, f32); 4] = [
        (0, 1.0, -1.0),
        (1, 1.0, 1.0),
        (3, -1.0, 1.0),
        (5, -1.0, -1.0),
    ];
    set(&mut w, "csu.head.w", |r, c| {
        signs
            .iter()
            .find(|s| s.0 == c)
            .map(|&(_, a, u)| match r {
                0 => -a,
                1 => a,
                2 => -u,
                3 => u,
                _ => 0.0,
            })
            .unwrap_or(0.0)
    });
    set(&mut w, "csu.head.b", |_, c| {
        if signs.iter().any(|s| s.0 == c) {
            0.0
        } else {
            -10.0
        }
    });
    Model::from_weights(cfg, &w).unwrap().shared()
}

fn check_trajectory(
    outs: &[FrameOutput],
    agent: &[bool],
    user: &[bool],
    label: &str,
) -> Result<(), String> {
    for (t, o) in outs.iter().enumerate() {
        ensure!(
            o.vad.agent_active == agent[t] && o.vad.user_active == user[t],
            "{label} frame {t}: vad ({}, {}) expected ({}, {})",
            o.vad.agent_active,
            o.vad.user_active,
            agent[t],
            user[t]
        );
    }
    let states: Vec<FineState> = outs.iter().map(|o| o.state).collect();
    let vads: Vec<_> = outs.iter().map(|o| o.vad).collect();
    let c = coarse_consistency(&states, &vads);
    ensure!(c == 1.0, "{label}: coarse consistency {c}");
    Ok(())
}

fn state_machinery() -> Outcome {
    let ce = state_ce_loss(&[1.0 / 7.0; 7], FineState::Listening).loss;
    ensure!((ce - 7f64.ln()).abs() <= 1e-9, "uniform cross-entropy {ce}");
    for a in [false, true] {
        for u in [false, true] {
            let c = coarse_category(a, u);
            let expected = match (a, u) {
                (true, false) => CoarseState::AgentOnly,
                (false, true) => CoarseState::UserOnly,
                (true, true) => CoarseState::BothActive,
                (false, false) => CoarseState::BothSilent,
            };
            ensure!(c == expected, "coarse_category({a}, {u}) = {c:?}");
            ensure!(
                FineState::ALL.iter().any(|s| s.coarse_parent() == c),
                "no fine state under {c:?}"
            );
        }
    }

    let cfg = EngineConfig::small();
    let model = scripted_state_model(&cfg);
    let scripts = [
        r#"{"seed":1,"segments":[{"speaker":"agent","duration":1.2},{"speaker":"user","duration":1.0,"overlap":0.3},{"speaker":"none","duration":0.6},{"speaker":"agent","duration":0.8}]}"#,
        r#"{"seed":4,"segments":[{"speaker":"user","duration":0.8},{"speaker":"agent","duration":1.6,"overlap":0.6},{"speaker":"none","duration":0.4}]}"#,
    ];
    let mut frames = 0;
    let mut seen = std::collections::BTreeSet::new();
    for (n, text) in scripts.iter().enumerate() {
        let synth = generate(&Script::parse(text).unwrap(), &cfg).unwrap();
        let init = SessionInit {
            reference_motion: synth.reference.clone(),
            first_audio: synth.records[0].agent_audio.clone(),
            seed: n as u64,
        };
        let inputs = lagged_inputs(&synth.records, &init);
        let agent = vad_trace(
            &inputs.iter().map(|i| i.agent_energy).collect::<Vec<_>>(),
            cfg.vad,
        )
        .unwrap();
        let user = vad_trace(
            &inputs.iter().map(|i| i.user_energy).collect::<Vec<_>>(),
            cfg.vad,
        )
        .unwrap();
        let run = || {
            Session::new(model.clone(), init.clone())
                .unwrap()
                .run_stream(&inputs)
                .unwrap()
        };
        let a = run();
        ensure!(a == run(), "script {n}: trajectory not deterministic");
        check_trajectory(&a, &agent, &user, &format!("script {n}"))?;
        seen.extend(a.iter().map(|o| o.state));
        frames += a.len();

        let mut r = Rng::seeded(n as u64 + 40);
        let (mut oa, mut ou) = (Vec::new(), Vec::new());
        let mut overridden = inputs.clone();
        for i in &mut overridden {
            let (x, y) = (r.below(4) != 0, r.below(3) == 0);
            i.agent_vad = Some(x);
            i.user_vad = Some(y);
            oa.push(x);
            ou.push(y);
        }
        let b = Session::new(model.clone(), init.clone())
            .unwrap()
            .run_stream(&overridden)
            .unwrap();
        check_trajectory(&b, &oa, &ou, &format!("script {n} overrides"))?;
        seen.extend(b.iter().map(|o| o.state));
        frames += b.len();
    }
    ensure!(seen.len() == 4, "only states {seen:?} visited");
    Ok(format!(
        "cross-entropy ln 7, {frames} scripted frames coarse-consistent"
    ))
}

fn latency() -> Outcome {
    let report = bench::run(&BenchOptions {
        frames: 300,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let head = format!(
        "p50 {:.1} ms, p95 {:.1} ms (budget {:.0} ms{})",
        report.p50_ms,
        report.p95_ms,
        report.budget_ms,
        if report.p50_ms <= report.budget_ms {
            ""
        } else {
            ", over"
        }
    );
    ensure!(
        report.stages_sum_exact,
        "{head}; stage times do not sum to frame latency"
    );
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("bench/baseline.json");
    let baseline = Baseline::load(&path).map_err(|e| e.to_string())?;
    let guard = baseline
        .check(&report)
        .ok_or_else(|| format!("{head}; no baseline for profile {}", report.profile))?;
    ensure!(
        guard.pass,
        "{head}; {:.2}x the baseline {:.1} ms, tolerance ±{:.0}%",
        guard.ratio,
        guard.baseline_p50_ms,
        guard.tolerance * 100.0
    );
    Ok(format!("{head}; {:.2}x baseline", guard.ratio))
}

fn gateway() -> Outcome {
    let golden = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let read = |n: &str| std::fs::read_to_string(golden.join(n)).map_err(|e| format!("{n}: {e}"));
    let input = read("session.in.ndjson")?;
    let expected = read("session.out.ndjson")?;
    let model = random_model(&EngineConfig::small(), 7);
    let server = Server::bind("127.0.0.1:0", model, ServerOptions::default())
        .unwrap()
        .spawn();
    let opts = DriveOptions {
        pace: Pace::Firehose,
        seed: 11,
        motion_dims: Some(4),
        ..Default::default()
    };
    let lines: Vec<String> = input.lines().map(String::from).collect();
    let addr = server.addr();
    let runs: Vec<_> = (0..2)
        .map(|_| {
            let (l, o) = (lines.clone(), opts.clone());
            std::thread::spawn(move || drive_lines(addr, l, &o).unwrap())
        })
        .collect();
    let reports: Vec<_> = runs.into_iter().map(|h| h.join().unwrap()).collect();
    let other_script = r#"{"seed":9,"segments":[{"speaker":"user","duration":1.2}]}"#;
    let synth = generate(
        &Script::parse(other_script).unwrap(),
        &EngineConfig::small(),
    )
    .unwrap();
    let stream = arig::formats::stream::StreamFile::interaction(
        synth.fps,
        arig::synth::EXTRACTOR,
        &synth.reference,
        &synth.records,
    )
    .unwrap();
    let other = drive_lines(addr, stream_lines(&stream, &opts).unwrap(), &opts).unwrap();
    server.shutdown();
    for (i, r) in reports.iter().enumerate() {
        ensure!(r.complete, "session {i} incomplete: {:?}", r.failure);
        let masked = transcript::mask(&r.transcript);
        transcript::validate(&masked).map_err(|e| e.to_string())?;
        if masked != expected {
            let line = masked
                .lines()
                .zip(expected.lines())
                .position(|(a, b)| a != b);
            return Err(format!(
                "session {i} differs from the golden transcript at line {line:?}"
            ));
        }
    }
    ensure!(other.complete, "third session incomplete");
    ensure!(
        transcript::digest(&other.transcript) != transcript::digest(&reports[0].transcript),
        "different input gave the same transcript"
    );
    Ok(format!(
        "{} lines byte-identical in two concurrent sessions, digest {}",
        expected.lines().count(),
        transcript::digest(&reports[0].transcript)
    ))
}

fn main() {
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("equivalence", equivalence),
        ("causality", causality),
        ("ddpm_oracle", ddpm_oracle),
        ("gradcheck", gradient_check),
        ("toy_training", toy_training),
        ("caches", cache_suite),
        ("structure", structural_constants),
        ("state_machinery", state_machinery),
        ("latency", latency),
        ("gateway", gateway),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut ran = 0;
    for (name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name:<16} {secs:>7.2}s  {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name:<16} {secs:>7.2}s  {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
