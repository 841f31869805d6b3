//! Synthetic interaction streams from a turn-taking script.
//!
//! A script is JSON:
//!
//! ```json
//! { "fps": 25, "seed": 3, "segments": [
//!     { "speaker": "user", "duration": 2.0 },
//!     { "speaker": "none", "duration": 1.0 },
//!     { "speaker": "agent", "duration": 2.0, "overlap": 0.4 } ] }
//! ```
//!
//! `overlap` is the time at the start of a segment during which the party
//! holding the floor keeps talking. A segment overlapped for its whole
//! duration is a backchannel and leaves the floor where it was.
//!
//! Fine states follow from the script: agent alone → speaking; user alone →
//! listening; agent taking the floor over the user's tail → speaking with
//! feedback; user taking the floor over the agent → interrupted; agent
//! backchannel → giving feedback; user backchannel → speaking with feedback;
//! silence after the agent → pause to think, otherwise → wait during pause.

use std::path::Path;

use arig_core::csu::FineState;
use arig_core::engine::FrameRecord;
use arig_core::rng::Rng;
use arig_core::{EngineConfig, MotionVector};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::formats::annotations::Annotation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Agent,
    User,
    None,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub speaker: Speaker,
    /// Seconds.
    pub duration: f64,
    #[serde(default)]
    pub overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    #[serde(default = "default_fps")]
    pub fps: u32,
    #[serde(default)]
    pub seed: u64,
    pub audio_dim: Option<usize>,
    pub motion_dim: Option<usize>,
    pub segments: Vec<Segment>,
}

fn default_fps() -> u32 {
    25
}

pub const EXTRACTOR: &str = "arig-synth";

#[derive(Debug, Clone, PartialEq)]
pub struct Synthesized {
    pub fps: u32,
    pub reference: MotionVector,
    pub records: Vec<FrameRecord>,
    pub annotations: Vec<Annotation>,
}

impl Script {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format(format!("synth script: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

struct Activity {
    agent: bool,
    user: bool,
    state: FineState,
}

fn frames(seconds: f64, fps: u32) -> usize {
    (seconds * fps as f64).round() as usize
}

fn timeline(script: &Script) -> Result<Vec<Activity>> {
    if script.fps == 0 {
        return Err(Error::format("synth script: fps must be positive"));
    }
    let mut out = Vec::new();
    let mut floor = Speaker::None;
    for (i, seg) in script.segments.iter().enumerate() {
        let bad = |m: &str| Error::format(format!("synth script segment {i}: {m}"));
        if !seg.duration.is_finite() || seg.duration < 0.0 {
            return Err(bad("duration must be a non-negative number of seconds"));
        }
        if !seg.overlap.is_finite() || seg.overlap < 0.0 || seg.overlap > seg.duration {
            return Err(bad("overlap must lie between 0 and the duration"));
        }
        let n = frames(seg.duration, script.fps);
        let o = frames(seg.overlap, script.fps).min(n);
        if o > 0 {
            let other = match seg.speaker {
                Speaker::Agent => Speaker::User,
                Speaker::User => Speaker::Agent,
                Speaker::None => return Err(bad("a silent segment cannot overlap")),
            };
            if floor != other {
                return Err(bad("overlap needs the other party to hold the floor"));
            }
        }
        let backchannel = o > 0 && o == n;
        for f in 0..n {
            let both = f < o;
            let a = match seg.speaker {
                Speaker::Agent => Activity {
                    agent: true,
                    user: both,
                    state: match (both, backchannel) {
                        (false, _) => FineState::Speaking,
                        (true, true) => FineState::GivingFeedback,
                        (true, false) => FineState::SpeakingWithFeedbackReceived,
                    },
                },
                Speaker::User => Activity {
                    agent: both,
                    user: true,
                    state: match (both, backchannel) {
                        (false, _) => FineState::Listening,
                        (true, true) => FineState::SpeakingWithFeedbackReceived,
                        (true, false) => FineState::Interrupted,
                    },
                },
                Speaker::None => Activity {
                    agent: false,
                    user: false,
                    state: if floor == Speaker::Agent {
                        FineState::PauseToThink
                    } else {
                        FineState::WaitDuringPause
                    },
                },
            };
            out.push(a);
        }
        if seg.speaker != Speaker::None && !backchannel {
            floor = seg.speaker;
        }
    }
    Ok(out)
}

/// Low-frequency head motion: three sinusoids per coordinate. Keypoint
/// coordinates stay inside `[0, 1]`.
struct MotionGen {
    freq: Vec<[f64; 3]>,
    phase: Vec<[f64; 3]>,
    keypoints: std::ops::Range<usize>,
}

impl MotionGen {
    fn new(r: &mut Rng, cfg: &EngineConfig) -> Self {
        let mut freq = Vec::with_capacity(cfg.motion_dim);
        let mut phase = Vec::with_capacity(cfg.motion_dim);
        for _ in 0..cfg.motion_dim {
            freq.push([
                r.uniform(0.05, 0.3),
                r.uniform(0.3, 0.8),
                r.uniform(0.8, 2.0),
            ]);
            phase.push([
                r.uniform(0.0, 6.3),
                r.uniform(0.0, 6.3),
                r.uniform(0.0, 6.3),
            ]);
        }
        let start = cfg.keypoint_offset.min(cfg.motion_dim);
        let end = (cfg.keypoint_offset + cfg.keypoint_len).min(cfg.motion_dim);
        MotionGen {
            freq,
            phase,
            keypoints: start..end,
        }
    }

    fn at(&self, seconds: f64, active: bool) -> Vec<f32> {
        let amp = if active {
            [0.12, 0.06, 0.03]
        } else {
            [0.06, 0.02, 0.005]
        };
        (0..self.freq.len())
            .map(|i| {
                let v: f64 = (0..3)
                    .map(|k| {
                        amp[k]
                            * (std::f64::consts::TAU * self.freq[i][k] * seconds + self.phase[i][k])
                                .sin()
                    })
                    .sum();
                if self.keypoints.contains(&i) {
                    (0.5 + 2.0 * v).clamp(0.0, 1.0) as f32
                } else {
                    v as f32
                }
            })
            .collect()
    }
}

/// Smooth random features, attenuated while the party is silent.
struct AudioGen {
    state: Vec<f64>,
    level: f64,
}

impl AudioGen {
    fn new(dim: usize) -> Self {
        AudioGen {
            state: vec![0.0; dim],
            level: 0.0,
        }
    }

    fn next(&mut self, r: &mut Rng, active: bool) -> (Vec<f32>, f32) {
        let innovation = (1.0f64 - 0.9 * 0.9).sqrt();
        for s in &mut self.state {
            *s = 0.9 * *s + innovation * r.normal();
        }
        self.level = 0.8 * self.level + 0.2 * r.normal();
        let gain = if active { 1.0 } else { 0.05 };
        let audio = self.state.iter().map(|v| (gain * v) as f32).collect();
        let energy = if active {
            0.4 + 0.1 * self.level.clamp(-1.0, 1.0)
        } else {
            0.01 + 0.005 * self.level.clamp(-1.0, 1.0)
        };
        (audio, energy as f32)
    }
}

pub fn generate(script: &Script, base: &EngineConfig) -> Result<Synthesized> {
    let mut cfg = base.clone();
    if let Some(d) = script.audio_dim {
        cfg.audio_dim = d;
    }
    if let Some(d) = script.motion_dim {
        cfg.motion_dim = d;
    }
    if cfg.audio_dim == 0 || cfg.motion_dim == 0 {
        return Err(Error::format("synth script: dimensions must be positive"));
    }
    let plan = timeline(script)?;
    let mut r = Rng::seeded(script.seed);
    let agent_motion = MotionGen::new(&mut r, &cfg);
    let user_motion = MotionGen::new(&mut r, &cfg);
    let reference = MotionVector::new(agent_motion.at(0.0, false), cfg.motion_dim)?;
    let (mut agent_audio, mut user_audio) =
        (AudioGen::new(cfg.audio_dim), AudioGen::new(cfg.audio_dim));
    let mut records = Vec::with_capacity(plan.len());
    let mut annotations = Vec::with_capacity(plan.len());
    for (t, a) in plan.iter().enumerate() {
        let seconds = t as f64 / script.fps as f64;
        let (aa, ae) = agent_audio.next(&mut r, a.agent);
        let (ua, ue) = user_audio.next(&mut r, a.user);
        records.push(FrameRecord {
            agent_audio: aa,
            agent_energy: ae,
            user_audio: ua,
            user_motion: user_motion.at(seconds, a.user),
            user_energy: ue,
        });
        annotations.push(Annotation {
            frame_index: t as u64,
            agent_active: a.agent,
            user_active: a.user,
            state: a.state,
        });
    }
    Ok(Synthesized {
        fps: script.fps,
        reference,
        records,
        annotations,
    })
}
