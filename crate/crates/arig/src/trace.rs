//! JSON form of [`FrameOutput`], shared by `run --trace` (one object per
//! line) and the gateway's `frame_out` messages.

use std::io::Write;

use arig_core::csu::{FineState, VadPair, NUM_STATES};
use arig_core::engine::StageTimes;
use arig_core::FrameOutput;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VadRecord {
    pub agent_active: bool,
    pub user_active: bool,
    pub coarse: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageRecord {
    pub ibu: u64,
    pub csu: u64,
    pub pmp: u64,
    pub sampler: u64,
}

/// Field for field the engine's frame output; `state` is the state index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub frame_index: u64,
    pub motion: Vec<f32>,
    pub state: u8,
    pub state_probs: [f32; NUM_STATES],
    pub vad: VadRecord,
    pub cis_digest: Option<Vec<f32>>,
    pub latency_micros: u64,
    pub stages: StageRecord,
    pub denoiser_evals: usize,
    pub keypoint_violations: usize,
}

impl OutputRecord {
    /// `motion_dims` keeps only the leading coordinates of the motion.
    pub fn new(o: &FrameOutput, motion_dims: Option<usize>) -> Self {
        let m = o.motion.as_slice();
        let keep = motion_dims.unwrap_or(m.len()).min(m.len());
        let StageTimes {
            ibu,
            csu,
            pmp,
            sampler,
        } = o.stages;
        OutputRecord {
            frame_index: o.frame_index,
            motion: m[..keep].to_vec(),
            state: o.state.index() as u8,
            state_probs: o.state_probs,
            vad: VadRecord {
                agent_active: o.vad.agent_active,
                user_active: o.vad.user_active,
                coarse: o.vad.coarse.name().to_string(),
            },
            cis_digest: o.cis_digest.clone(),
            latency_micros: o.latency_micros,
            stages: StageRecord {
                ibu,
                csu,
                pmp,
                sampler,
            },
            denoiser_evals: o.denoiser_evals,
            keypoint_violations: o.keypoint_violations,
        }
    }

    pub fn fine_state(&self) -> Option<FineState> {
        FineState::from_index(self.state as usize)
    }

    pub fn vad_pair(&self) -> VadPair {
        VadPair::new(self.vad.agent_active, self.vad.user_active)
    }

    /// Zeroes the timing fields so records compare across runs.
    pub fn mask_timing(&mut self) {
        self.latency_micros = 0;
        self.stages = StageRecord::default();
    }
}

pub struct TraceWriter<W: Write> {
    out: W,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(out: W) -> Self {
        TraceWriter { out }
    }

    pub fn write(&mut self, o: &FrameOutput) -> Result<()> {
        self.write_with(o, None)
    }

    /// Like [`write`](Self::write), keeping `motion_dims` leading motion
    /// coordinates.
    pub fn write_with(&mut self, o: &FrameOutput, motion_dims: Option<usize>) -> Result<()> {
        let line = serde_json::to_string(&OutputRecord::new(o, motion_dims))
            .expect("records always serialize");
        writeln!(self.out, "{line}").map_err(|e| Error::io("trace", e))
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush().map_err(|e| Error::io("trace", e))?;
        Ok(self.out)
    }
}
