//! Conversation state understanding: per-track voice activity, the coarse
//! 4-way category implied by it, and the learned 7-way state.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec::Vec;

use crate::config::{EngineConfig, VadConfig};
use crate::error::{Error, Result};
use crate::ibu::CisToken;
use crate::tensor::{
    softmax_in_place, Attention, AttentionMask, FeedForward, LayerNorm, Linear, Tensor,
};
use crate::weights::{InitRule, Loader};

pub const NUM_STATES: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CoarseState {
    AgentOnly,
    UserOnly,
    BothActive,
    BothSilent,
}

impl CoarseState {
    pub fn name(self) -> &'static str {
        match self {
            CoarseState::AgentOnly => "agent_only",
            CoarseState::UserOnly => "user_only",
            CoarseState::BothActive => "both_active",
            CoarseState::BothSilent => "both_silent",
        }
    }
}

pub fn coarse_category(agent_active: bool, user_active: bool) -> CoarseState {
    match (agent_active, user_active) {
        (true, false) => CoarseState::AgentOnly,
        (false, true) => CoarseState::UserOnly,
        (true, true) => CoarseState::BothActive,
        (false, false) => CoarseState::BothSilent,
    }
}

/// The seven fine-grained states of the agent. Discriminants are the state
/// indices used on disk and on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum FineState {
    Speaking = 0,
    SpeakingWithFeedbackReceived = 1,
    Interrupted = 2,
    Listening = 3,
    GivingFeedback = 4,
    PauseToThink = 5,
    WaitDuringPause = 6,
}

impl FineState {
    pub const ALL: [FineState; NUM_STATES] = [
        FineState::Speaking,
        FineState::SpeakingWithFeedbackReceived,
        FineState::Interrupted,
        FineState::Listening,
        FineState::GivingFeedback,
        FineState::PauseToThink,
        FineState::WaitDuringPause,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// The coarse category this state is expected under.
    pub fn coarse_parent(self) -> CoarseState {
        match self {
            FineState::Speaking => CoarseState::AgentOnly,
            FineState::SpeakingWithFeedbackReceived
            | FineState::Interrupted
            | FineState::GivingFeedback => CoarseState::BothActive,
            FineState::Listening => CoarseState::UserOnly,
            FineState::PauseToThink | FineState::WaitDuringPause => CoarseState::BothSilent,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FineState::Speaking => "speaking",
            FineState::SpeakingWithFeedbackReceived => "speaking_with_feedback",
            FineState::Interrupted => "interrupted",
            FineState::Listening => "listening",
            FineState::GivingFeedback => "giving_feedback",
            FineState::PauseToThink => "pause_to_think",
            FineState::WaitDuringPause => "wait_during_pause",
        }
    }
}

/// Sessions start with the agent listening.
pub const INITIAL_STATE: FineState = FineState::Listening;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VadPair {
    pub agent_active: bool,
    pub user_active: bool,
    pub coarse: CoarseState,
}

impl VadPair {
    pub fn new(agent_active: bool, user_active: bool) -> Self {
        VadPair {
            agent_active,
            user_active,
            coarse: coarse_category(agent_active, user_active),
        }
    }
}

/// Windowed-mean energy threshold with a hangover counter.
#[derive(Debug, Clone, PartialEq)]
pub struct VadTracker {
    pub(crate) cfg: VadConfig,
    pub(crate) energies: VecDeque<f32>,
    pub(crate) hangover_left: usize,
}

impl VadTracker {
    pub fn new(cfg: VadConfig) -> Self {
        VadTracker {
            cfg,
            energies: VecDeque::with_capacity(cfg.window + 1),
            hangover_left: 0,
        }
    }

    pub(crate) fn from_parts(cfg: VadConfig, energies: Vec<f32>, hangover_left: usize) -> Self {
        VadTracker {
            cfg,
            energies: energies.into_iter().collect(),
            hangover_left,
        }
    }

    pub fn energies(&self) -> impl Iterator<Item = f32> + '_ {
        self.energies.iter().copied()
    }

    pub fn hangover_left(&self) -> usize {
        self.hangover_left
    }

    /// Feeds one frame's energy and returns whether the track is active.
    pub fn push(&mut self, energy: f32) -> Result<bool> {
        if !(energy >= 0.0) || !energy.is_finite() {
            return Err(Error::validation(format!(
                "frame energy must be finite and nonnegative, got {energy}"
            )));
        }
        self.energies.push_back(energy);
        while self.energies.len() > self.cfg.window.max(1) {
            self.energies.pop_front();
        }
        let mean = self.energies.iter().sum::<f32>() / self.energies.len() as f32;
        if mean > self.cfg.threshold {
            self.hangover_left = self.cfg.hangover;
            Ok(true)
        } else if self.hangover_left > 0 {
            self.hangover_left -= 1;
            Ok(true)
        } else {
            Ok(false)
        }
    }
}

/// Activity decision for every frame of an energy trace.
pub fn vad_trace(energies: &[f32], cfg: VadConfig) -> Result<Vec<bool>> {
    if cfg.window == 0 || !(cfg.threshold > 0.0) {
        return Err(Error::config("vad window must be >= 1 and threshold > 0"));
    }
    let mut t = VadTracker::new(cfg);
    energies.iter().map(|&e| t.push(e)).collect()
}

/// Activity at the last frame of `energies`, replaying the automaton from
/// the start of the slice.
pub fn vad_classify(
    energies: &[f32],
    threshold: f32,
    window: usize,
    hangover: usize,
) -> Result<bool> {
    let trace = vad_trace(
        energies,
        VadConfig {
            window,
            threshold,
            hangover,
        },
    )?;
    Ok(trace.last().copied().unwrap_or(false))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatePrediction {
    /// The state latent handed to motion prediction.
    pub latent: Vec<f32>,
    pub probs: [f32; NUM_STATES],
    pub next: FineState,
}

#[derive(Debug, Clone)]
pub struct CsuModel {
    pub state_embed: Tensor,
    pub vad_agent: Tensor,
    pub vad_user: Tensor,
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: Attention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
    pub head: Linear,
}

impl CsuModel {
    pub fn load(l: &mut Loader<'_>, cfg: &EngineConfig) -> Result<Self> {
        let d = cfg.d_model;
        Ok(CsuModel {
            state_embed: l.tensor("csu.state_embed", NUM_STATES, d, InitRule::Uniform(0.5))?,
            vad_agent: l.tensor("csu.vad_agent", 2, d, InitRule::Uniform(0.5))?,
            vad_user: l.tensor("csu.vad_user", 2, d, InitRule::Uniform(0.5))?,
            ln_q: l.layer_norm("csu.ln_q", d)?,
            ln_kv: l.layer_norm("csu.ln_kv", d)?,
            attn: l.attention("csu.attn", d, d, cfg)?,
            ln_ff: l.layer_norm("csu.ln_ff", d)?,
            ff: l.feed_forward("csu", d, cfg.d_ff)?,
            head: l.linear("csu.head", d, NUM_STATES)?,
        })
    }

    /// Cross-attention from the previous state's embedding onto
    /// `[agent VAD, user VAD, cis]`, then a feed-forward; the classifier head
    /// gives the next state.
    pub fn predict_state(
        &self,
        prev: FineState,
        vad: VadPair,
        cis: &CisToken,
    ) -> Result<StatePrediction> {
        let q = Tensor::row_vector(self.state_embed.row(prev.index()).to_vec());
        let cond = Tensor::from_rows(&[
            self.vad_agent.row(vad.agent_active as usize),
            self.vad_user.row(vad.user_active as usize),
            cis.vector.as_slice(),
        ])?;
        let mut s = q.clone();
        s.add_assign(&self.attn.forward(
            &self.ln_q.forward(&q)?,
            &self.ln_kv.forward(&cond)?,
            &AttentionMask::None,
        )?)?;
        let f = self.ff.forward(&self.ln_ff.forward(&s)?)?;
        s.add_assign(&f)?;
        let latent = s.into_data();
        let mut probs = [0.0f32; NUM_STATES];
        probs.copy_from_slice(&self.head.forward_vec(&latent)?);
        softmax_in_place(&mut probs);
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric {
                module: "csu",
                detail: format!("state probabilities {probs:?}"),
            });
        }
        Ok(StatePrediction {
            latent,
            probs,
            next: FineState::from_index(argmax(&probs)).unwrap_or(INITIAL_STATE),
        })
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    /// The target probability was zero and the log was clamped.
    pub clamped: bool,
}

/// `-ln(probs[target])`, clamped at `-ln(f64::EPSILON)` for a zero target
/// probability.
pub fn state_ce_loss(probs: &[f64], target: FineState) -> CrossEntropy {
    let p = probs[target.index()];
    if p <= 0.0 {
        CrossEntropy {
            loss: -libm::log(f64::EPSILON),
            clamped: true,
        }
    } else {
        CrossEntropy {
            loss: -libm::log(p),
            clamped: false,
        }
    }
}

/// Fraction of frames whose fine state sits under the coarse category of
/// the frame's VAD pair.
pub fn coarse_consistency(states: &[FineState], vads: &[VadPair]) -> f64 {
    if states.is_empty() {
        return 1.0;
    }
    let ok = states
        .iter()
        .zip(vads)
        .filter(|(s, v)| s.coarse_parent() == v.coarse)
        .count();
    ok as f64 / states.len() as f64
}
