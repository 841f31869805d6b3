//! The per-frame autoregressive loop.
//!
//! A [`Session`] owns every cache and advances one frame per
//! [`Session::step`]. Agent audio for frame `T` arrives with frame `T`;
//! user audio, motion and energy arrive one frame late, so the input for
//! frame `T` carries the user's frame `T-1`.

mod oracle;
mod snapshot;

pub use oracle::run_full_prefix;
pub use snapshot::{
    read_header as read_snapshot_header, SnapshotHeader, SNAPSHOT_MAGIC, SNAPSHOT_VERSION,
};

use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::caches::{chunk_index, CacheSet, ChunkCache, ContextCache, FrameWindow, Upsert};
use crate::csu::{FineState, VadPair, VadTracker, INITIAL_STATE, NUM_STATES};
use crate::diffusion::sample;
use crate::error::{Error, Result};
use crate::ibu::{DecoderKvCache, Track};
use crate::motion::MotionVector;
use crate::rng::Rng;
use crate::weights::Model;

/// Everything the engine consumes for frame `frame_index`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameInput {
    pub frame_index: u64,
    /// Agent audio features of this frame.
    pub agent_audio: Vec<f32>,
    /// User audio features of the previous frame.
    pub user_audio: Vec<f32>,
    /// User motion of the previous frame.
    pub user_motion: Vec<f32>,
    /// Agent speech energy of this frame.
    pub agent_energy: f32,
    /// User speech energy of the previous frame.
    pub user_energy: f32,
    /// Replaces the agent motion fed back from the previous frame.
    pub agent_motion: Option<Vec<f32>>,
    pub agent_vad: Option<bool>,
    pub user_vad: Option<bool>,
}

/// Per-stage wall time of one step, in microseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StageTimes {
    pub ibu: u64,
    pub csu: u64,
    pub pmp: u64,
    pub sampler: u64,
}

impl StageTimes {
    pub fn total(&self) -> u64 {
        self.ibu + self.csu + self.pmp + self.sampler
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutput {
    pub frame_index: u64,
    pub motion: MotionVector,
    pub state: FineState,
    pub state_probs: [f32; NUM_STATES],
    pub vad: VadPair,
    /// The cis-token, when [`Session::emit_cis`] is set.
    pub cis_digest: Option<Vec<f32>>,
    pub latency_micros: u64,
    pub stages: StageTimes,
    pub denoiser_evals: usize,
    /// Keypoint coordinates of the motion outside `[0, 1]`.
    pub keypoint_violations: usize,
}

/// Monotonic microsecond clock. The core crate has no notion of wall time.
pub trait Clock {
    fn now_micros(&self) -> u64;
}

/// A clock that never advances.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullClock;

impl Clock for NullClock {
    fn now_micros(&self) -> u64 {
        0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    /// Reuse cached context keys/values.
    Incremental,
    /// Re-run the context decoder over every entry each frame.
    Full,
}

/// Reference motion and first-frame audio used to pre-fill every cache.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionInit {
    pub reference_motion: MotionVector,
    pub first_audio: Vec<f32>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Session {
    model: Arc<Model>,
    init: SessionInit,
    caches: CacheSet,
    kv: DecoderKvCache,
    vad_agent: VadTracker,
    vad_user: VadTracker,
    state: FineState,
    t: u64,
    poisoned: bool,
    pub decode_mode: DecodeMode,
    pub emit_cis: bool,
}

impl Session {
    pub fn new(model: Arc<Model>, init: SessionInit) -> Result<Self> {
        let cfg = &model.config;
        if init.reference_motion.len() != cfg.motion_dim {
            return Err(Error::validation(format!(
                "reference motion has {} values, expected {}",
                init.reference_motion.len(),
                cfg.motion_dim
            )));
        }
        if init.first_audio.len() != cfg.audio_dim
            || !init.first_audio.iter().all(|v| v.is_finite())
        {
            return Err(Error::validation(format!(
                "first audio frame must be {} finite values",
                cfg.audio_dim
            )));
        }
        let ibu = &model.ibu;
        let reference = init.reference_motion.as_slice();
        let audio0 = init.first_audio.as_slice();
        let c = cfg.chunk;
        let mut agent = ChunkCache::new(Track::Agent, c)?;
        let mut user = ChunkCache::new(Track::User, c)?;
        for j in -(c as i64)..0 {
            agent.push(ibu.merge_behavior(Track::Agent, audio0, reference, j)?)?;
            user.push(ibu.merge_behavior(Track::User, audio0, reference, j)?)?;
        }
        let cond = ibu.embed_audio(audio0)?;
        let a: Vec<&[f32]> = agent.tokens().map(|t| t.vector.as_slice()).collect();
        let u: Vec<&[f32]> = user.tokens().map(|t| t.vector.as_slice()).collect();
        let summary = ibu.summarize_window(&a, &u, &cond)?;
        let mut context = ContextCache::new(cfg.context)?;
        context.upsert(ibu.compress_summary(&summary, 0, false)?)?;
        let caches = CacheSet {
            agent,
            user,
            context,
            audio: FrameWindow::repeated(cfg.audio_window, audio0),
            motion: FrameWindow::repeated(cfg.temporal_window, reference),
            fine: FrameWindow::new(cfg.temporal_window, cfg.d_model),
        };
        Ok(Session {
            vad_agent: VadTracker::new(cfg.vad),
            vad_user: VadTracker::new(cfg.vad),
            model,
            init,
            caches,
            kv: DecoderKvCache::default(),
            state: INITIAL_STATE,
            t: 0,
            poisoned: false,
            decode_mode: DecodeMode::Incremental,
            emit_cis: false,
        })
    }

    pub fn model(&self) -> &Arc<Model> {
        &self.model
    }

    pub fn init(&self) -> &SessionInit {
        &self.init
    }

    /// Index of the next frame to be generated.
    pub fn frame(&self) -> u64 {
        self.t
    }

    /// State predicted for the last generated frame.
    pub fn state(&self) -> FineState {
        self.state
    }

    pub fn caches(&self) -> &CacheSet {
        &self.caches
    }

    pub fn step(&mut self, input: &FrameInput) -> Result<FrameOutput> {
        self.step_with_clock(input, &NullClock)
    }

    /// One frame. Malformed or out-of-order input is rejected before any
    /// state changes; a numeric failure mid-step poisons the session.
    pub fn step_with_clock(
        &mut self,
        input: &FrameInput,
        clock: &dyn Clock,
    ) -> Result<FrameOutput> {
        if self.poisoned {
            return Err(Error::sequencing(
                "session failed earlier and must be restored or rebuilt",
            ));
        }
        if input.frame_index != self.t {
            return Err(Error::sequencing(format!(
                "expected frame {}, got {}",
                self.t, input.frame_index
            )));
        }
        self.check_input(input)?;
        let out = self.advance(input, clock);
        self.poisoned = out.is_err();
        out
    }

    pub fn run_stream(&mut self, inputs: &[FrameInput]) -> Result<Vec<FrameOutput>> {
        inputs.iter().map(|i| self.step(i)).collect()
    }

    fn check_input(&self, input: &FrameInput) -> Result<()> {
        let cfg = &self.model.config;
        let dims = [
            ("agent_audio", input.agent_audio.len(), cfg.audio_dim),
            ("user_audio", input.user_audio.len(), cfg.audio_dim),
            ("user_motion", input.user_motion.len(), cfg.motion_dim),
        ];
        for (name, got, want) in dims {
            if got != want {
                return Err(Error::validation(format!(
                    "{name} has {got} values, expected {want}"
                )));
            }
        }
        if let Some(m) = &input.agent_motion {
            if m.len() != cfg.motion_dim {
                return Err(Error::validation(format!(
                    "agent_motion has {} values, expected {}",
                    m.len(),
                    cfg.motion_dim
                )));
            }
        }
        let finite = input
            .agent_audio
            .iter()
            .chain(&input.user_audio)
            .chain(&input.user_motion)
            .chain(input.agent_motion.iter().flatten())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::validation("frame input contains non-finite values"));
        }
        for e in [input.agent_energy, input.user_energy] {
            if !(e >= 0.0 && e.is_finite()) {
                return Err(Error::validation(format!(
                    "frame energy must be finite and nonnegative, got {e}"
                )));
            }
        }
        Ok(())
    }

    fn advance(&mut self, input: &FrameInput, clock: &dyn Clock) -> Result<FrameOutput> {
        let model = Arc::clone(&self.model);
        let cfg = &model.config;
        let ibu = &model.ibu;
        let t = self.t;
        let c = &mut self.caches;
        let t0 = clock.now_micros();

        c.audio.push(input.agent_audio.clone())?;
        if let Some(m) = &input.agent_motion {
            c.motion.replace_newest(m.clone())?;
        }
        let prev_audio = c.audio.get(c.audio.len() - 2).unwrap_or(&input.agent_audio);
        let prev_motion = newest(&c.motion)?;
        let agent_tok = ibu.merge_behavior(Track::Agent, prev_audio, prev_motion, t as i64)?;
        let user_tok =
            ibu.merge_behavior(Track::User, &input.user_audio, &input.user_motion, t as i64)?;
        c.agent.push(agent_tok)?;
        c.user.push(user_tok)?;

        let cond = ibu.embed_audio(&input.agent_audio)?;
        let a: Vec<&[f32]> = c.agent.tokens().map(|t| t.vector.as_slice()).collect();
        let u: Vec<&[f32]> = c.user.tokens().map(|t| t.vector.as_slice()).collect();
        let summary = ibu.summarize_window(&a, &u, &cond)?;
        let complete = (t + 1) % cfg.chunk as u64 == 0;
        let entry = ibu.compress_summary(&summary, chunk_index(t, cfg.chunk)?, complete)?;
        if c.context.upsert(entry)? == Upsert::Evicted {
            self.kv.clear();
        }
        let cis = match self.decode_mode {
            DecodeMode::Incremental => {
                ibu.context_decode_incremental(&c.context, &mut self.kv, t)?
            }
            DecodeMode::Full => ibu.context_decode(&c.context, t)?,
        };
        finite("ibu", &cis.vector)?;
        let t1 = clock.now_micros();

        let agent_active = self.vad_agent.push(input.agent_energy)?;
        let user_active = self.vad_user.push(input.user_energy)?;
        let vad = VadPair::new(
            input.agent_vad.unwrap_or(agent_active),
            input.user_vad.unwrap_or(user_active),
        );
        let pred = model.csu.predict_state(self.state, vad, &cis)?;
        let t2 = clock.now_micros();

        let audio = c.audio.padded();
        let outline = model.pmp.coarse.forward(newest(&c.motion)?, &audio)?;
        let fine = model
            .pmp
            .fine
            .forward(&outline, &cis, &pred.latent, &cond)?;
        c.fine.push(fine)?;
        let z = model
            .pmp
            .temporal
            .forward(&c.fine.padded(), &c.motion.padded())?;
        finite("pmp", &z.0)?;
        let t3 = clock.now_micros();

        let mut rng = Rng::for_frame(self.init.seed, t);
        let s = sample(&model.diffmlp, &model.schedule, &z.0, &mut rng)?;
        let motion = MotionVector::new(s.x, cfg.motion_dim).map_err(|e| Error::Numeric {
            module: "diffusion",
            detail: format!("{e}"),
        })?;
        c.motion.push(motion.as_slice().to_vec())?;
        let t4 = clock.now_micros();

        self.state = pred.next;
        self.t += 1;
        let stages = StageTimes {
            ibu: t1.saturating_sub(t0),
            csu: t2.saturating_sub(t1),
            pmp: t3.saturating_sub(t2),
            sampler: t4.saturating_sub(t3),
        };
        Ok(FrameOutput {
            frame_index: t,
            keypoint_violations: motion.keypoint_violations(cfg.keypoint_offset, cfg.keypoint_len),
            motion,
            state: pred.next,
            state_probs: pred.probs,
            vad,
            cis_digest: self.emit_cis.then_some(cis.vector),
            latency_micros: stages.total(),
            stages,
            denoiser_evals: s.evals,
        })
    }
}

fn newest(w: &FrameWindow) -> Result<&[f32]> {
    w.newest()
        .ok_or_else(|| Error::sequencing("frame window is empty"))
}

fn finite(module: &'static str, v: &[f32]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::Numeric {
            module,
            detail: format!("non-finite value at index {i} of {}", v.len()),
        }),
    }
}

/// One frame of a recorded or synthetic two-party stream, both tracks
/// aligned to the same frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub agent_audio: Vec<f32>,
    pub agent_energy: f32,
    pub user_audio: Vec<f32>,
    pub user_motion: Vec<f32>,
    pub user_energy: f32,
}

/// Builds engine inputs from aligned records, shifting the user side by
/// one frame. Frame 0 sees the initialization audio and reference motion
/// as the user's previous frame.
pub fn lagged_inputs(records: &[FrameRecord], init: &SessionInit) -> Vec<FrameInput> {
    records
        .iter()
        .enumerate()
        .map(|(t, r)| {
            let (ua, um, ue) = match t.checked_sub(1).map(|p| &records[p]) {
                Some(p) => (p.user_audio.clone(), p.user_motion.clone(), p.user_energy),
                None => (
                    init.first_audio.clone(),
                    init.reference_motion.as_slice().to_vec(),
                    0.0,
                ),
            };
            FrameInput {
                frame_index: t as u64,
                agent_audio: r.agent_audio.clone(),
                user_audio: ua,
                user_motion: um,
                agent_energy: r.agent_energy,
                user_energy: ue,
                agent_motion: None,
                agent_vad: None,
                user_vad: None,
            }
        })
        .collect()
}
