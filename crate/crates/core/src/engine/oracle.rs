//! Whole-prefix evaluation: every frame is recomputed from the raw inputs
//! `0..=T` and the previously generated motions and states, with no state
//! carried between frames except those outputs.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use super::{FrameInput, FrameOutput, SessionInit, StageTimes};
use crate::caches::{chunk_index, ChunkSummary, ContextCache};
use crate::csu::{vad_trace, FineState, VadPair, INITIAL_STATE};
use crate::diffusion::sample;
use crate::error::{Error, Result};
use crate::ibu::{CisToken, Track};
use crate::motion::MotionVector;
use crate::rng::Rng;
use crate::weights::Model;

struct Prefix<'a> {
    model: &'a Model,
    init: &'a SessionInit,
    inputs: &'a [FrameInput],
    generated: &'a [FrameOutput],
    summaries: BTreeMap<i64, ChunkSummary>,
}

impl Prefix<'_> {
    fn audio(&self, j: i64) -> &[f32] {
        if j < 0 {
            &self.init.first_audio
        } else {
            &self.inputs[j as usize].agent_audio
        }
    }

    /// Agent motion of frame `j` as the engine sees it at frame `j + 1`.
    fn motion(&self, j: i64) -> &[f32] {
        if j < 0 {
            return self.init.reference_motion.as_slice();
        }
        match &self.inputs[j as usize + 1].agent_motion {
            Some(m) => m,
            None => self.generated[j as usize].motion.as_slice(),
        }
    }

    fn token(&self, track: Track, j: i64) -> Result<Vec<f32>> {
        let ibu = &self.model.ibu;
        let reference = self.init.reference_motion.as_slice();
        let tok = match (track, j < 0) {
            (_, true) => ibu.merge_behavior(track, &self.init.first_audio, reference, j)?,
            (Track::Agent, false) => {
                ibu.merge_behavior(track, self.audio(j - 1), self.motion(j - 1), j)?
            }
            (Track::User, false) => {
                let i = &self.inputs[j as usize];
                ibu.merge_behavior(track, &i.user_audio, &i.user_motion, j)?
            }
        };
        Ok(tok.vector)
    }

    /// The context entry written at step `s`.
    fn summary_at(&mut self, s: i64) -> Result<ChunkSummary> {
        if let Some(v) = self.summaries.get(&s) {
            return Ok(v.clone());
        }
        let c = self.model.config.chunk as i64;
        let ibu = &self.model.ibu;
        let mut agent = Vec::new();
        let mut user = Vec::new();
        for j in s - c + 1..=s {
            agent.push(self.token(Track::Agent, j)?);
            user.push(self.token(Track::User, j)?);
        }
        let a: Vec<&[f32]> = agent.iter().map(|v| v.as_slice()).collect();
        let u: Vec<&[f32]> = user.iter().map(|v| v.as_slice()).collect();
        let cond = ibu.embed_audio(self.audio(s))?;
        let summary = ibu.summarize_window(&a, &u, &cond)?;
        let out = ibu.compress_summary(
            &summary,
            chunk_index(s as u64, c as usize)?,
            (s + 1) % c == 0,
        )?;
        self.summaries.insert(s, out.clone());
        Ok(out)
    }

    fn cis(&mut self, j: i64) -> Result<CisToken> {
        let c = self.model.config.chunk as i64;
        let w = self.model.config.context as i64;
        let newest = j / c;
        let mut ctx = ContextCache::new(w as usize)?;
        for k in (newest - w + 1).max(0)..=newest {
            let s = if k == newest { j } else { (k + 1) * c - 1 };
            let e = self.summary_at(s)?;
            ctx.upsert(e)?;
        }
        self.model.ibu.context_decode(&ctx, j as u64)
    }
}

/// Evaluates every frame of `inputs` directly from the whole prefix.
pub fn run_full_prefix(
    model: &Model,
    init: &SessionInit,
    inputs: &[FrameInput],
) -> Result<Vec<FrameOutput>> {
    let cfg = &model.config;
    let mut outputs: Vec<FrameOutput> = Vec::with_capacity(inputs.len());
    for (t, input) in inputs.iter().enumerate() {
        if input.frame_index != t as u64 {
            return Err(Error::sequencing(
                "oracle inputs must start at frame 0 and be contiguous",
            ));
        }
        let ti = t as i64;
        let mut p = Prefix {
            model,
            init,
            inputs: &inputs[..=t],
            generated: &outputs,
            summaries: BTreeMap::new(),
        };

        let prefix = &inputs[..=t];
        let agent_energy: Vec<f32> = prefix.iter().map(|i| i.agent_energy).collect();
        let user_energy: Vec<f32> = prefix.iter().map(|i| i.user_energy).collect();
        let agent_trace = vad_trace(&agent_energy, cfg.vad)?;
        let user_trace = vad_trace(&user_energy, cfg.vad)?;
        let vad_at = |j: usize| {
            VadPair::new(
                prefix[j].agent_vad.unwrap_or(agent_trace[j]),
                prefix[j].user_vad.unwrap_or(user_trace[j]),
            )
        };

        let first = (ti - cfg.temporal_window as i64 + 1).max(0);
        let mut fine = Vec::new();
        let mut last = None;
        for j in first..=ti {
            let cis = p.cis(j)?;
            let prev = if j == 0 {
                INITIAL_STATE
            } else {
                outputs[j as usize - 1].state
            };
            let vad = vad_at(j as usize);
            let pred = model.csu.predict_state(prev, vad, &cis)?;
            let audio: Vec<&[f32]> = (j - cfg.audio_window as i64 + 1..=j)
                .map(|k| p.audio(k))
                .collect();
            let outline = model.pmp.coarse.forward(p.motion(j - 1), &audio)?;
            let cond = model.ibu.embed_audio(p.audio(j))?;
            fine.push(
                model
                    .pmp
                    .fine
                    .forward(&outline, &cis, &pred.latent, &cond)?,
            );
            if j == ti {
                last = Some((pred, vad));
            }
        }
        let (pred, vad) = last.ok_or_else(|| Error::sequencing("empty oracle window"))?;

        let slots = cfg.temporal_window;
        let mut fine_slots: Vec<&[f32]> = Vec::with_capacity(slots);
        for _ in fine.len()..slots {
            fine_slots.push(&fine[0]);
        }
        fine_slots.extend(fine.iter().map(|v| v.as_slice()));
        let motions: Vec<&[f32]> = (ti - slots as i64..ti).map(|k| p.motion(k)).collect();
        let z = model.pmp.temporal.forward(&fine_slots, &motions)?;

        let mut rng = Rng::for_frame(init.seed, t as u64);
        let s = sample(&model.diffmlp, &model.schedule, &z.0, &mut rng)?;
        let motion = MotionVector::new(s.x, cfg.motion_dim)?;
        let state: FineState = pred.next;
        outputs.push(FrameOutput {
            frame_index: t as u64,
            keypoint_violations: motion.keypoint_violations(cfg.keypoint_offset, cfg.keypoint_len),
            motion,
            state,
            state_probs: pred.probs,
            vad,
            cis_digest: None,
            latency_micros: 0,
            stages: StageTimes::default(),
            denoiser_evals: s.evals,
        });
    }
    Ok(outputs)
}
