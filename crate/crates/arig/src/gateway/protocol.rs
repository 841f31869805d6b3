//! Wire messages. One JSON object per message, tagged by `type`.

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{OutputRecord, StageRecord, VadRecord};

pub const PROTOCOL_VERSION: u32 = 1;

/// How server messages carry float vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    /// Numeric JSON arrays.
    #[default]
    Json,
    /// Base64 of little-endian f32 bytes.
    Base64,
}

/// A float vector in either encoding. Inputs may mix both forms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Features {
    Values(Vec<f32>),
    Base64(String),
}

impl Features {
    pub fn encode(v: &[f32], enc: Encoding) -> Self {
        match enc {
            Encoding::Json => Features::Values(v.to_vec()),
            Encoding::Base64 => {
                let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
                Features::Base64(STANDARD.encode(bytes))
            }
        }
    }

    pub fn decode(&self) -> Result<Vec<f32>> {
        match self {
            Features::Values(v) => Ok(v.clone()),
            Features::Base64(s) => {
                let bytes = STANDARD
                    .decode(s)
                    .map_err(|e| Error::Protocol(format!("bad base64 features: {e}")))?;
                if bytes.len() % 4 != 0 {
                    return Err(Error::Protocol(format!(
                        "base64 features decode to {} bytes, not a multiple of 4",
                        bytes.len()
                    )));
                }
                Ok(bytes
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect())
            }
        }
    }
}

/// Explicit activity per track; replaces the energy detector's decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VadOverride {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameIn {
    pub frame_index: u64,
    pub agent_audio: Features,
    /// The user's audio of the previous frame.
    pub user_audio: Features,
    /// The user's motion of the previous frame.
    pub user_motion: Features,
    pub agent_energy: f32,
    pub user_energy: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vad_override: Option<VadOverride>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_motion: Option<Features>,
    /// Send every motion coordinate for this frame regardless of
    /// `motion_dims`.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub full_motion: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameOut {
    pub frame_index: u64,
    pub motion: Features,
    pub state: u8,
    pub state_name: String,
    pub state_probs: Vec<f32>,
    pub vad: VadRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cis: Option<Features>,
    pub latency_micros: u64,
    pub stages: StageRecord,
    pub denoiser_evals: usize,
    pub keypoint_violations: usize,
}

impl FrameOut {
    pub fn from_record(r: &OutputRecord, enc: Encoding) -> Self {
        let state_name = r
            .fine_state()
            .map(|s| s.name())
            .unwrap_or("unknown")
            .to_string();
        FrameOut {
            frame_index: r.frame_index,
            motion: Features::encode(&r.motion, enc),
            state: r.state,
            state_name,
            state_probs: r.state_probs.to_vec(),
            vad: r.vad.clone(),
            cis: r.cis_digest.as_deref().map(|c| Features::encode(c, enc)),
            latency_micros: r.latency_micros,
            stages: r.stages,
            denoiser_evals: r.denoiser_evals,
            keypoint_violations: r.keypoint_violations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Message {
    Hello {
        version: u32,
        #[serde(default)]
        encoding: Encoding,
    },
    Config {
        seed: u64,
        reference_motion: Features,
        first_audio: Features,
        /// Leading motion coordinates sent in each `frame_out`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        motion_dims: Option<usize>,
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        emit_cis: bool,
    },
    FrameIn(FrameIn),
    FrameOut(FrameOut),
    /// Interaction state. Sent once after `config` with no frame index,
    /// then after each `frame_out` whose state differs from the last one.
    State {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        frame_index: Option<u64>,
        state: u8,
        state_name: String,
        /// The coarse group the state belongs to.
        coarse: String,
    },
    Error {
        code: ErrorCode,
        message: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        frame_index: Option<u64>,
    },
    Bye {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        frames: Option<u64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    /// Not valid JSON or not a known message. The connection closes.
    Malformed,
    /// Unsupported protocol version. The connection closes.
    Version,
    /// Message out of order, e.g. `frame_in` before `config`.
    Sequence,
    /// Reference motion or first audio of the wrong size.
    InvalidConfig,
    /// `frame_index` is not the next expected frame.
    FrameGap,
    /// Wrong feature sizes or non-finite values. The session is unchanged.
    InvalidFrame,
    /// Non-finite model output. The connection closes.
    Numeric,
    /// Too many queued inputs. The connection closes.
    Backpressure,
}

impl Message {
    pub fn parse(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Protocol(format!("malformed message: {e}")))
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("messages always serialize")
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "hello",
            Message::Config { .. } => "config",
            Message::FrameIn(_) => "frame_in",
            Message::FrameOut(_) => "frame_out",
            Message::State { .. } => "state",
            Message::Error { .. } => "error",
            Message::Bye { .. } => "bye",
        }
    }

    pub fn error(code: ErrorCode, message: impl Into<String>, frame_index: Option<u64>) -> Self {
        Message::Error {
            code,
            message: message.into(),
            frame_index,
        }
    }
}
