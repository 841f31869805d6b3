//! Progressive motion prediction: the conditioning path that turns the
//! previous motion, recent audio, the cis-token and the state latent into
//! the latent `z` consumed by the diffusion head.

use alloc::format;
use alloc::vec::Vec;

use crate::config::EngineConfig;
use crate::error::{Error, Result};
use crate::ibu::{AudioCond, CisToken};
use crate::tensor::{
    gated_residual, sinusoidal, Attention, AttentionMask, FeedForward, LayerNorm, Linear, Tensor,
};
use crate::weights::{InitRule, Loader};

/// Conditioning latent for the motion sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentZ(pub Vec<f32>);

/// Cross-attention from the embedded previous motion onto the latest audio
/// frames.
#[derive(Debug, Clone)]
pub struct CoarseOutline {
    pub motion_in: Linear,
    pub audio_in: Linear,
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: Attention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl CoarseOutline {
    pub fn forward(&self, prev_motion: &[f32], audio_window: &[&[f32]]) -> Result<Vec<f32>> {
        Ok(self.forward_inner(prev_motion, audio_window, true)?.0)
    }

    /// Returns the outline and the per-head attention weights over the
    /// audio slots. `positional = false` drops the slot encodings.
    pub fn forward_inner(
        &self,
        prev_motion: &[f32],
        audio_window: &[&[f32]],
        positional: bool,
    ) -> Result<(Vec<f32>, Vec<Tensor>)> {
        if audio_window.is_empty() {
            return Err(Error::validation(
                "coarse outline needs at least one audio frame",
            ));
        }
        let q = Tensor::row_vector(self.motion_in.forward_vec(prev_motion)?);
        let mut kv = self.audio_in.forward(&Tensor::from_rows(audio_window)?)?;
        if positional {
            add_positions(&mut kv);
        }
        let (a, w) = self.attn.forward_with_weights(
            &self.ln_q.forward(&q)?,
            &self.ln_kv.forward(&kv)?,
            &AttentionMask::None,
        )?;
        let mut x = q;
        x.add_assign(&a)?;
        let f = self.ff.forward(&self.ln_ff.forward(&x)?)?;
        x.add_assign(&f)?;
        Ok((x.into_data(), w))
    }
}

/// Gated cross-attention from the outline onto `[cis, state, audio]`, then
/// a gated feed-forward. Both gates start at zero.
#[derive(Debug, Clone)]
pub struct FineCondition {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: Attention,
    pub gate_attn: Vec<f32>,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
    pub gate_ff: Vec<f32>,
}

impl FineCondition {
    pub fn forward(
        &self,
        outline: &[f32],
        cis: &CisToken,
        state: &[f32],
        audio: &AudioCond,
    ) -> Result<Vec<f32>> {
        let d = outline.len();
        if cis.vector.len() != d || state.len() != d || audio.0.len() != d {
            return Err(Error::validation(format!(
                "fine condition inputs must all be {d}-dim"
            )));
        }
        let q = Tensor::row_vector(outline.to_vec());
        let kv = Tensor::from_rows(&[cis.vector.as_slice(), state, audio.0.as_slice()])?;
        let a = self.attn.forward(
            &self.ln_q.forward(&q)?,
            &self.ln_kv.forward(&kv)?,
            &AttentionMask::None,
        )?;
        let mut x = q;
        gated_residual(&mut x, &self.gate_attn, &a)?;
        let f = self.ff.forward(&self.ln_ff.forward(&x)?)?;
        gated_residual(&mut x, &self.gate_ff, &f)?;
        Ok(x.into_data())
    }
}

/// Causal self-attention over the most recent frames, projected to `z`.
#[derive(Debug, Clone)]
pub struct TemporalLayer {
    pub motion_in: Linear,
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
    pub ln_out: LayerNorm,
    pub z_proj: Linear,
}

impl TemporalLayer {
    /// Slot `k` is `fine[k] + embed(motions[k]) + position(k)`; oldest first.
    pub fn forward(&self, fine: &[&[f32]], motions: &[&[f32]]) -> Result<LatentZ> {
        if fine.len() != motions.len() || fine.is_empty() {
            return Err(Error::validation(format!(
                "temporal layer got {} fine slots and {} motion slots",
                fine.len(),
                motions.len()
            )));
        }
        let mut slots = self.motion_in.forward(&Tensor::from_rows(motions)?)?;
        slots.add_assign(&Tensor::from_rows(fine)?)?;
        add_positions(&mut slots);
        self.forward_slots(&slots)
    }

    /// The attention stack on already composed slots.
    pub fn forward_slots(&self, slots: &Tensor) -> Result<LatentZ> {
        let mut x = slots.clone();
        let h = self.ln1.forward(&x)?;
        x.add_assign(&self.attn.forward(&h, &h, &AttentionMask::Causal)?)?;
        let h = self.ln2.forward(&x)?;
        x.add_assign(&self.ff.forward(&h)?)?;
        let last = x.slice_rows(x.rows() - 1, x.rows());
        let z = self.z_proj.forward(&self.ln_out.forward(&last)?)?;
        Ok(LatentZ(z.into_data()))
    }
}

fn add_positions(t: &mut Tensor) {
    let d = t.cols();
    for p in 0..t.rows() {
        let pe = sinusoidal::<f32>(p as f64, d);
        for (v, e) in t.row_mut(p).iter_mut().zip(pe) {
            *v += e;
        }
    }
}

#[derive(Debug, Clone)]
pub struct PmpModel {
    pub coarse: CoarseOutline,
    pub fine: FineCondition,
    pub temporal: TemporalLayer,
}

impl PmpModel {
    pub fn load(l: &mut Loader<'_>, cfg: &EngineConfig) -> Result<Self> {
        let d = cfg.d_model;
        let coarse = CoarseOutline {
            motion_in: l.linear("pmp.coarse.motion_in", cfg.motion_dim, d)?,
            audio_in: l.linear("pmp.coarse.audio_in", cfg.audio_dim, d)?,
            ln_q: l.layer_norm("pmp.coarse.ln_q", d)?,
            ln_kv: l.layer_norm("pmp.coarse.ln_kv", d)?,
            attn: l.attention("pmp.coarse.attn", d, d, cfg)?,
            ln_ff: l.layer_norm("pmp.coarse.ln_ff", d)?,
            ff: l.feed_forward("pmp.coarse", d, cfg.d_ff)?,
        };
        let fine = FineCondition {
            ln_q: l.layer_norm("pmp.fine.ln_q", d)?,
            ln_kv: l.layer_norm("pmp.fine.ln_kv", d)?,
            attn: l.attention("pmp.fine.attn", d, d, cfg)?,
            gate_attn: l.vector("pmp.fine.gate_attn", d, InitRule::Gate)?,
            ln_ff: l.layer_norm("pmp.fine.ln_ff", d)?,
            ff: l.feed_forward("pmp.fine", d, cfg.d_ff)?,
            gate_ff: l.vector("pmp.fine.gate_ff", d, InitRule::Gate)?,
        };
        let temporal = TemporalLayer {
            motion_in: l.linear("pmp.temporal.motion_in", cfg.motion_dim, d)?,
            ln1: l.layer_norm("pmp.temporal.ln1", d)?,
            attn: l.attention("pmp.temporal.attn", d, d, cfg)?,
            ln2: l.layer_norm("pmp.temporal.ln2", d)?,
            ff: l.feed_forward("pmp.temporal", d, cfg.d_ff)?,
            ln_out: l.layer_norm("pmp.temporal.ln_out", d)?,
            z_proj: l.linear("pmp.temporal.z_proj", d, cfg.latent_dim)?,
        };
        Ok(PmpModel {
            coarse,
            fine,
            temporal,
        })
    }
}
