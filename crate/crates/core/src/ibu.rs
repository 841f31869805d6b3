//! Interactive behavior understanding.
//!
//! Per frame, audio and motion of each party are fused into a behavior
//! token. The tokens of the latest chunk window run through two
//! dual-stream blocks (separate modulation and projections per party, one
//! joint attention over both parties) and one integrated block (parallel
//! attention and MLP over the concatenation). The agent part is pooled into
//! the chunk's interaction summary, projected, and stored in the context
//! cache. A causal decoder over the context yields the cis-token.

use alloc::format;
use alloc::vec::Vec;

use crate::caches::{ChunkSummary, ContextCache};
use crate::config::EngineConfig;
use crate::error::{Error, Result};
use crate::tensor::{
    attend, gated_residual, gelu, modulate, normalize_rows, silu, sinusoidal, split_chunks,
    Attention, AttentionMask, FeedForward, LayerNorm, Linear, Tensor, LN_EPS,
};
use crate::weights::{InitRule, Loader};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Track {
    Agent,
    User,
}

impl Track {
    pub fn code(self) -> u8 {
        match self {
            Track::Agent => 0,
            Track::User => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Track::Agent),
            1 => Some(Track::User),
            _ => None,
        }
    }
}

/// Fused audio-visual behavior of one party at one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorToken {
    pub vector: Vec<f32>,
    pub track: Track,
    pub frame_index: i64,
}

/// Embedded current agent audio; conditions every modulated IBU block.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioCond(pub Vec<f32>);

/// Contextual interaction summary.
#[derive(Debug, Clone, PartialEq)]
pub struct CisToken {
    pub vector: Vec<f32>,
    pub as_of_frame: u64,
}

/// Two-layer GELU MLP over the concatenated `[audio, motion]` input.
#[derive(Debug, Clone)]
pub struct MergeBlock {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl MergeBlock {
    fn forward(&self, audio: &[f32], motion: &[f32]) -> Result<Vec<f32>> {
        let mut x = Vec::with_capacity(audio.len() + motion.len());
        x.extend_from_slice(audio);
        x.extend_from_slice(motion);
        if x.len() != self.fc1.inputs() {
            return Err(Error::validation(format!(
                "merge input has {} values, expected {}",
                x.len(),
                self.fc1.inputs()
            )));
        }
        let h: Vec<f32> = self.fc1.forward_vec(&x)?.into_iter().map(gelu).collect();
        self.fc2.forward_vec(&h)
    }
}

/// One party's half of a dual-stream layer.
#[derive(Debug, Clone)]
pub struct StreamBranch {
    /// `cond → 6·d`: attention shift/scale/gate, then MLP shift/scale/gate.
    pub modulation: Linear,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ff: FeedForward,
}

#[derive(Debug, Clone)]
pub struct BidirLayer {
    pub agent: StreamBranch,
    pub user: StreamBranch,
    pub heads: usize,
}

impl BidirLayer {
    fn forward(&self, agent: &mut Tensor, user: &mut Tensor, cond_act: &[f32]) -> Result<()> {
        let ma = self.agent.modulation.forward_vec(cond_act)?;
        let mu = self.user.modulation.forward_vec(cond_act)?;
        let pa = split_chunks(&ma, 6);
        let pu = split_chunks(&mu, 6);

        let ha = modulate(&normalize_rows(agent, LN_EPS as f32), pa[0], pa[1]);
        let hu = modulate(&normalize_rows(user, LN_EPS as f32), pu[0], pu[1]);
        let q = Tensor::concat_rows(&self.agent.q.forward(&ha)?, &self.user.q.forward(&hu)?)?;
        let k = Tensor::concat_rows(&self.agent.k.forward(&ha)?, &self.user.k.forward(&hu)?)?;
        let v = Tensor::concat_rows(&self.agent.v.forward(&ha)?, &self.user.v.forward(&hu)?)?;
        let joint = attend(&q, &k, &v, &AttentionMask::None, self.heads)?;
        let na = agent.rows();
        let oa = self.agent.o.forward(&joint.slice_rows(0, na))?;
        let ou = self.user.o.forward(&joint.slice_rows(na, joint.rows()))?;
        gated_residual(agent, pa[2], &oa)?;
        gated_residual(user, pu[2], &ou)?;

        let ha = modulate(&normalize_rows(agent, LN_EPS as f32), pa[3], pa[4]);
        let hu = modulate(&normalize_rows(user, LN_EPS as f32), pu[3], pu[4]);
        let fa = self.agent.ff.forward(&ha)?;
        let fu = self.user.ff.forward(&hu)?;
        gated_residual(agent, pa[5], &fa)?;
        gated_residual(user, pu[5], &fu)?;
        Ok(())
    }
}

/// Parallel attention + MLP layer over the concatenated parties.
#[derive(Debug, Clone)]
pub struct IntegratedLayer {
    /// `cond → 3·d`: shift, scale, gate.
    pub modulation: Linear,
    pub attn: Attention,
    pub ff: FeedForward,
}

impl IntegratedLayer {
    fn forward(&self, x: &mut Tensor, cond_act: &[f32]) -> Result<()> {
        let m = self.modulation.forward_vec(cond_act)?;
        let p = split_chunks(&m, 3);
        let h = modulate(&normalize_rows(x, LN_EPS as f32), p[0], p[1]);
        let mut y = self.attn.forward(&h, &h, &AttentionMask::None)?;
        y.add_assign(&self.ff.forward(&h)?)?;
        gated_residual(x, p[2], &y)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

/// Cached per-layer key/value rows for the context decoder.
///
/// Valid as long as the entries it was built from keep their slot
/// positions; an eviction shifts every slot and requires [`clear`].
///
/// [`clear`]: DecoderKvCache::clear
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DecoderKvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    rows: usize,
}

impl DecoderKvCache {
    pub fn clear(&mut self) {
        self.keys.iter_mut().for_each(Vec::clear);
        self.values.iter_mut().for_each(Vec::clear);
        self.rows = 0;
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
}

/// Causal decoder with learned slot positions over the context cache.
#[derive(Debug, Clone)]
pub struct ContextDecoder {
    pub positions: Tensor,
    pub layers: Vec<DecoderLayer>,
    pub ln_out: LayerNorm,
}

impl ContextDecoder {
    fn embed(&self, ctx: &ContextCache) -> Result<Tensor> {
        if ctx.is_empty() {
            return Err(Error::validation(
                "context decode on an empty context cache",
            ));
        }
        if ctx.len() > self.positions.rows() {
            return Err(Error::config(format!(
                "context holds {} entries but only {} positions exist",
                ctx.len(),
                self.positions.rows()
            )));
        }
        let rows: Vec<&[f32]> = ctx.entries().map(|e| e.vector.as_slice()).collect();
        let mut x = Tensor::from_rows(&rows)?;
        for p in 0..x.rows() {
            for (v, &pe) in x.row_mut(p).iter_mut().zip(self.positions.row(p)) {
                *v += pe;
            }
        }
        Ok(x)
    }

    /// Decoder outputs at every position, recomputed from scratch.
    pub fn decode_all(&self, ctx: &ContextCache) -> Result<Tensor> {
        let mut x = self.embed(ctx)?;
        for layer in &self.layers {
            let h = layer.ln1.forward(&x)?;
            x.add_assign(&layer.attn.forward(&h, &h, &AttentionMask::Causal)?)?;
            let h = layer.ln2.forward(&x)?;
            x.add_assign(&layer.ff.forward(&h)?)?;
        }
        self.ln_out.forward(&x)
    }

    /// Output at the newest position, reusing cached keys/values for every
    /// older slot. The newest slot is always recomputed because its summary
    /// may have been refreshed.
    pub fn decode_newest_incremental(
        &self,
        ctx: &ContextCache,
        cache: &mut DecoderKvCache,
    ) -> Result<Vec<f32>> {
        let x_all = self.embed(ctx)?;
        let n = x_all.rows();
        if cache.keys.len() != self.layers.len() {
            cache.keys = alloc::vec![Vec::new(); self.layers.len()];
            cache.values = alloc::vec![Vec::new(); self.layers.len()];
            cache.rows = 0;
        }
        // rows [start, n) are (re)computed
        let start = cache.rows.min(n - 1);
        let mut x = x_all.slice_rows(start, n);
        for (l, layer) in self.layers.iter().enumerate() {
            let inner = layer.attn.q.outputs();
            let h = layer.ln1.forward(&x)?;
            let q = layer.attn.q.forward(&h)?;
            let k_new = layer.attn.k.forward(&h)?;
            let v_new = layer.attn.v.forward(&h)?;
            cache.keys[l].truncate(start * inner);
            cache.values[l].truncate(start * inner);
            cache.keys[l].extend_from_slice(k_new.data());
            cache.values[l].extend_from_slice(v_new.data());
            let k = Tensor::from_vec(n, inner, cache.keys[l].clone())?;
            let v = Tensor::from_vec(n, inner, cache.values[l].clone())?;
            let a = attend(&q, &k, &v, &AttentionMask::Causal, layer.attn.heads)?;
            x.add_assign(&layer.attn.o.forward(&a)?)?;
            let h = layer.ln2.forward(&x)?;
            x.add_assign(&layer.ff.forward(&h)?)?;
        }
        cache.rows = n;
        let last = x.slice_rows(x.rows() - 1, x.rows());
        Ok(self.ln_out.forward(&last)?.into_data())
    }
}

#[derive(Debug, Clone)]
pub struct IbuModel {
    pub audio_embed: Linear,
    pub merge_agent: MergeBlock,
    pub merge_user: MergeBlock,
    pub bidir: Vec<BidirLayer>,
    pub integ: Vec<IntegratedLayer>,
    pub compress: Linear,
    pub decoder: ContextDecoder,
    audio_dim: usize,
    motion_dim: usize,
    d_model: usize,
}

impl IbuModel {
    pub fn load(l: &mut Loader<'_>, cfg: &EngineConfig) -> Result<Self> {
        let d = cfg.d_model;
        let inner = cfg.inner_dim();
        let merge = |l: &mut Loader<'_>, who: &str| -> Result<MergeBlock> {
            Ok(MergeBlock {
                fc1: l.linear(
                    &format!("ibu.merge.{who}.fc1"),
                    cfg.audio_dim + cfg.motion_dim,
                    d,
                )?,
                fc2: l.linear(&format!("ibu.merge.{who}.fc2"), d, d)?,
            })
        };
        let branch = |l: &mut Loader<'_>, p: &str| -> Result<StreamBranch> {
            Ok(StreamBranch {
                modulation: l.modulation(&format!("{p}.mod"), d, d, 6, &[2, 5])?,
                q: l.linear(&format!("{p}.q"), d, inner)?,
                k: l.linear(&format!("{p}.k"), d, inner)?,
                v: l.linear(&format!("{p}.v"), d, inner)?,
                o: l.linear(&format!("{p}.o"), inner, d)?,
                ff: l.feed_forward(p, d, cfg.d_ff)?,
            })
        };

        let audio_embed = l.linear("ibu.audio_embed", cfg.audio_dim, d)?;
        let merge_agent = merge(l, "agent")?;
        let merge_user = merge(l, "user")?;
        let mut bidir = Vec::with_capacity(cfg.bidir_depth);
        for i in 0..cfg.bidir_depth {
            bidir.push(BidirLayer {
                agent: branch(l, &format!("ibu.bidir.{i}.agent"))?,
                user: branch(l, &format!("ibu.bidir.{i}.user"))?,
                heads: cfg.heads,
            });
        }
        let mut integ = Vec::with_capacity(cfg.integ_depth);
        for i in 0..cfg.integ_depth {
            let p = format!("ibu.integ.{i}");
            integ.push(IntegratedLayer {
                modulation: l.modulation(&format!("{p}.mod"), d, d, 3, &[2])?,
                attn: l.attention(&format!("{p}.attn"), d, d, cfg)?,
                ff: l.feed_forward(&p, d, cfg.d_ff)?,
            });
        }
        let compress = l.linear("ibu.compress", d, d)?;
        let positions = l.tensor("ibu.ctx.pos", cfg.context, d, InitRule::Uniform(0.02))?;
        let mut layers = Vec::with_capacity(cfg.context_depth);
        for i in 0..cfg.context_depth {
            let p = format!("ibu.ctx.{i}");
            layers.push(DecoderLayer {
                ln1: l.layer_norm(&format!("{p}.ln1"), d)?,
                attn: l.attention(&format!("{p}.attn"), d, d, cfg)?,
                ln2: l.layer_norm(&format!("{p}.ln2"), d)?,
                ff: l.feed_forward(&p, d, cfg.d_ff)?,
            });
        }
        let ln_out = l.layer_norm("ibu.ctx.ln_out", d)?;
        Ok(IbuModel {
            audio_embed,
            merge_agent,
            merge_user,
            bidir,
            integ,
            compress,
            decoder: ContextDecoder {
                positions,
                layers,
                ln_out,
            },
            audio_dim: cfg.audio_dim,
            motion_dim: cfg.motion_dim,
            d_model: d,
        })
    }

    pub fn embed_audio(&self, audio: &[f32]) -> Result<AudioCond> {
        if audio.len() != self.audio_dim {
            return Err(Error::validation(format!(
                "audio feature has {} values, expected {}",
                audio.len(),
                self.audio_dim
            )));
        }
        Ok(AudioCond(self.audio_embed.forward_vec(audio)?))
    }

    /// Fuses one party's audio and motion into a behavior token.
    pub fn merge_behavior(
        &self,
        track: Track,
        audio: &[f32],
        motion: &[f32],
        frame_index: i64,
    ) -> Result<BehaviorToken> {
        if audio.len() != self.audio_dim || motion.len() != self.motion_dim {
            return Err(Error::validation(format!(
                "merge expects audio {} and motion {}, got {} and {}",
                self.audio_dim,
                self.motion_dim,
                audio.len(),
                motion.len()
            )));
        }
        let block = match track {
            Track::Agent => &self.merge_agent,
            Track::User => &self.merge_user,
        };
        Ok(BehaviorToken {
            vector: block.forward(audio, motion)?,
            track,
            frame_index,
        })
    }

    /// The dual-stream layers. Shapes of both parties are preserved.
    pub fn bidirectional_block(
        &self,
        agent: &Tensor,
        user: &Tensor,
        cond: &AudioCond,
    ) -> Result<(Tensor, Tensor)> {
        if agent.rows() + user.rows() == 0 {
            return Err(Error::validation(
                "bidirectional block needs at least one token",
            ));
        }
        let act = self.cond_act(cond)?;
        let (mut a, mut u) = (agent.clone(), user.clone());
        for layer in &self.bidir {
            layer.forward(&mut a, &mut u, &act)?;
        }
        Ok((a, u))
    }

    /// Integrated layers over `[agent; user]`; returns the mean of the agent
    /// rows as the interaction summary.
    pub fn integrated_block(
        &self,
        agent: &Tensor,
        user: &Tensor,
        cond: &AudioCond,
    ) -> Result<Vec<f32>> {
        if agent.rows() == 0 {
            return Err(Error::validation("integrated block needs agent tokens"));
        }
        let act = self.cond_act(cond)?;
        let mut x = Tensor::concat_rows(agent, user)?;
        for layer in &self.integ {
            layer.forward(&mut x, &act)?;
        }
        Ok(x.slice_rows(0, agent.rows()).mean_rows())
    }

    /// Interaction summary of a chunk window: slot positions are added to
    /// both parties' tokens before the dual-stream and integrated blocks.
    pub fn summarize_window(
        &self,
        agent: &[&[f32]],
        user: &[&[f32]],
        cond: &AudioCond,
    ) -> Result<Vec<f32>> {
        let a = self.positioned(agent)?;
        let u = self.positioned(user)?;
        let (a, u) = self.bidirectional_block(&a, &u, cond)?;
        self.integrated_block(&a, &u, cond)
    }

    pub fn compress_summary(
        &self,
        summary: &[f32],
        chunk_index: u64,
        complete: bool,
    ) -> Result<ChunkSummary> {
        Ok(ChunkSummary {
            chunk_index,
            vector: self.compress.forward_vec(summary)?,
            complete,
        })
    }

    /// cis-token from a full recomputation over the context.
    pub fn context_decode(&self, ctx: &ContextCache, as_of_frame: u64) -> Result<CisToken> {
        let out = self.decoder.decode_all(ctx)?;
        Ok(CisToken {
            vector: out.row(out.rows() - 1).to_vec(),
            as_of_frame,
        })
    }

    /// cis-token reusing cached keys/values for older context slots.
    pub fn context_decode_incremental(
        &self,
        ctx: &ContextCache,
        cache: &mut DecoderKvCache,
        as_of_frame: u64,
    ) -> Result<CisToken> {
        Ok(CisToken {
            vector: self.decoder.decode_newest_incremental(ctx, cache)?,
            as_of_frame,
        })
    }

    fn cond_act(&self, cond: &AudioCond) -> Result<Vec<f32>> {
        if cond.0.len() != self.d_model {
            return Err(Error::config(format!(
                "audio condition has {} values, expected {}",
                cond.0.len(),
                self.d_model
            )));
        }
        Ok(cond.0.iter().map(|&c| silu(c)).collect())
    }

    fn positioned(&self, rows: &[&[f32]]) -> Result<Tensor> {
        if rows.is_empty() {
            return Ok(Tensor::zeros(0, self.d_model));
        }
        let mut t = Tensor::from_rows(rows)?;
        for p in 0..t.rows() {
            let pe = sinusoidal::<f32>(p as f64, self.d_model);
            for (v, e) in t.row_mut(p).iter_mut().zip(pe) {
                *v += e;
            }
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights::{InitMode, Model};
    use alloc::vec;

    fn model(mode: InitMode) -> Model {
        Model::init(&EngineConfig::small(), 5, mode).unwrap()
    }

    fn rand_rows(seed: u64, n: usize, d: usize) -> Vec<Vec<f32>> {
        let mut r = crate::rng::Rng::seeded(seed);
        (0..n)
            .map(|_| (0..d).map(|_| r.uniform(-1.0, 1.0) as f32).collect())
            .collect()
    }

    fn as_refs(v: &[Vec<f32>]) -> Vec<&[f32]> {
        v.iter().map(|r| r.as_slice()).collect()
    }

    #[test]
    fn merge_shapes_and_zero_case() {
        let cfg = EngineConfig::small();
        let m = model(InitMode::Random);
        let t = m
            .ibu
            .merge_behavior(
                Track::Agent,
                &vec![0.3; cfg.audio_dim],
                &vec![0.1; cfg.motion_dim],
                0,
            )
            .unwrap();
        assert_eq!(t.vector.len(), cfg.d_model);

        let mut zeroed = m.ibu.clone();
        zeroed
            .merge_agent
            .fc1
            .bias
            .iter_mut()
            .for_each(|b| *b = 0.0);
        zeroed
            .merge_agent
            .fc2
            .bias
            .iter_mut()
            .for_each(|b| *b = 0.0);
        let t = zeroed
            .merge_behavior(
                Track::Agent,
                &vec![0.0; cfg.audio_dim],
                &vec![0.0; cfg.motion_dim],
                0,
            )
            .unwrap();
        assert!(t.vector.iter().all(|&v| v == 0.0));

        assert!(m
            .ibu
            .merge_behavior(Track::User, &vec![0.0; 3], &vec![0.0; cfg.motion_dim], 0)
            .is_err());
    }

    #[test]
    fn merge_reacts_to_motion() {
        let cfg = EngineConfig::small();
        let m = model(InitMode::Random);
        let audio = vec![0.2; cfg.audio_dim];
        let a = m
            .ibu
            .merge_behavior(Track::User, &audio, &vec![0.1; cfg.motion_dim], 0)
            .unwrap();
        let mut motion = vec![0.1; cfg.motion_dim];
        motion[3] = 0.9;
        let b = m
            .ibu
            .merge_behavior(Track::User, &audio, &motion, 0)
            .unwrap();
        let diff = a
            .vector
            .iter()
            .zip(&b.vector)
            .fold(0.0f32, |mx, (x, y)| mx.max((x - y).abs()));
        assert!(diff > 0.0);
    }

    #[test]
    fn zero_gates_make_bidirectional_identity() {
        let cfg = EngineConfig::small();
        let m = model(InitMode::Standard);
        let a = Tensor::from_rows(&rand_rows(1, cfg.chunk, cfg.d_model)).unwrap();
        let u = Tensor::from_rows(&rand_rows(2, cfg.chunk, cfg.d_model)).unwrap();
        let cond = m.ibu.embed_audio(&vec![0.4; cfg.audio_dim]).unwrap();
        let (a2, u2) = m.ibu.bidirectional_block(&a, &u, &cond).unwrap();
        assert_eq!(a2, a);
        assert_eq!(u2, u);
    }

    #[test]
    fn bidirectional_shapes_and_cross_track_flow() {
        let cfg = EngineConfig {
            chunk: 6,
            ..EngineConfig::small()
        };
        let m = Model::init(&cfg, 5, InitMode::Random).unwrap();
        let a = Tensor::from_rows(&rand_rows(1, 6, cfg.d_model)).unwrap();
        let u = Tensor::from_rows(&rand_rows(2, 6, cfg.d_model)).unwrap();
        let cond = m.ibu.embed_audio(&vec![0.4; cfg.audio_dim]).unwrap();
        let (a2, u2) = m.ibu.bidirectional_block(&a, &u, &cond).unwrap();
        assert_eq!(a2.shape(), (6, cfg.d_model));
        assert_eq!(u2.shape(), (6, cfg.d_model));

        let mut up = u.clone();
        up.set(4, 0, up.get(4, 0) + 0.5);
        let (a3, _) = m.ibu.bidirectional_block(&a, &up, &cond).unwrap();
        assert_ne!(a3, a2);

        let empty = Tensor::zeros(0, cfg.d_model);
        assert!(m.ibu.bidirectional_block(&empty, &empty, &cond).is_err());
    }

    #[test]
    fn integrated_identity_pools_shared_token() {
        let cfg = EngineConfig::small();
        let m = model(InitMode::Standard);
        let row = rand_rows(3, 1, cfg.d_model).remove(0);
        let a = Tensor::from_rows(&[row.clone(), row.clone(), row.clone()]).unwrap();
        let u = Tensor::from_rows(&rand_rows(4, 3, cfg.d_model)).unwrap();
        let cond = m.ibu.embed_audio(&vec![0.1; cfg.audio_dim]).unwrap();
        let s = m.ibu.integrated_block(&a, &u, &cond).unwrap();
        assert_eq!(s.len(), cfg.d_model);
        for (x, y) in s.iter().zip(&row) {
            assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0));
        }
    }

    #[test]
    fn summary_is_order_sensitive() {
        let cfg = EngineConfig::small();
        let m = model(InitMode::Random);
        let a = rand_rows(5, cfg.chunk, cfg.d_model);
        let u = rand_rows(6, cfg.chunk, cfg.d_model);
        let cond = m.ibu.embed_audio(&vec![0.1; cfg.audio_dim]).unwrap();
        let s1 = m
            .ibu
            .summarize_window(&as_refs(&a), &as_refs(&u), &cond)
            .unwrap();
        let mut ur = u.clone();
        ur.reverse();
        let s2 = m
            .ibu
            .summarize_window(&as_refs(&a), &as_refs(&ur), &cond)
            .unwrap();
        assert_ne!(s1, s2);
    }

    #[test]
    fn compress_identity_and_tags() {
        let cfg = EngineConfig::small();
        let mut m = model(InitMode::Random);
        let d = cfg.d_model;
        let mut eye = Tensor::zeros(d, d);
        for i in 0..d {
            eye.set(i, i, 1.0);
        }
        m.ibu.compress = Linear::new(eye, vec![0.0; d]).unwrap();
        let v = rand_rows(7, 1, d).remove(0);
        let s = m.ibu.compress_summary(&v, 4, true).unwrap();
        assert_eq!(s.vector, v);
        assert_eq!((s.chunk_index, s.complete), (4, true));
    }

    #[test]
    fn compress_has_no_collisions() {
        let cfg = EngineConfig::small();
        let m = model(InitMode::Random);
        let outs: Vec<Vec<f32>> = rand_rows(8, 100, cfg.d_model)
            .iter()
            .map(|v| m.ibu.compress_summary(v, 0, false).unwrap().vector)
            .collect();
        for i in 0..outs.len() {
            for j in i + 1..outs.len() {
                assert_ne!(outs[i], outs[j]);
            }
        }
    }

    fn ctx_with(n: usize, d: usize, cap: usize, seed: u64) -> ContextCache {
        let mut ctx = ContextCache::new(cap).unwrap();
        for (i, v) in rand_rows(seed, n, d).into_iter().enumerate() {
            ctx.upsert(ChunkSummary {
                chunk_index: i as u64,
                vector: v,
                complete: true,
            })
            .unwrap();
        }
        ctx
    }

    #[test]
    fn context_decode_is_causal() {
        let cfg = EngineConfig::small();
        let m = model(InitMode::Random);
        let short = ctx_with(4, cfg.d_model, cfg.context, 9);
        let long = ctx_with(5, cfg.d_model, cfg.context, 9);
        let a = m.ibu.decoder.decode_all(&short).unwrap();
        let b = m.ibu.decoder.decode_all(&long).unwrap();
        for p in 0..4 {
            assert_eq!(a.row(p), b.row(p));
        }
        let single = ctx_with(1, cfg.d_model, cfg.context, 9);
        let cis = m.ibu.context_decode(&single, 0).unwrap();
        assert_eq!(cis.vector.len(), cfg.d_model);
        assert!(m
            .ibu
            .context_decode(&ContextCache::new(4).unwrap(), 0)
            .is_err());
    }

    #[test]
    fn incremental_decode_matches_full() {
        let cfg = EngineConfig::small();
        let m = model(InitMode::Random);
        let mut cache = DecoderKvCache::default();
        let mut ctx = ContextCache::new(cfg.context).unwrap();
        let rows = rand_rows(10, 40, cfg.d_model);
        let mut step = 0;
        for i in 0..8u64 {
            for k in 0..3 {
                let complete = k == 2;
                let up = ctx
                    .upsert(ChunkSummary {
                        chunk_index: i,
                        vector: rows[step].clone(),
                        complete,
                    })
                    .unwrap();
                if up == crate::caches::Upsert::Evicted {
                    cache.clear();
                }
                step += 1;
                let inc = m
                    .ibu
                    .context_decode_incremental(&ctx, &mut cache, 0)
                    .unwrap();
                let full = m.ibu.context_decode(&ctx, 0).unwrap();
                assert_eq!(inc.vector, full.vector);
            }
        }
    }

    #[test]
    fn full_context_shape() {
        let cfg = EngineConfig {
            context: 64,
            ..EngineConfig::small()
        };
        let m = Model::init(&cfg, 1, InitMode::Random).unwrap();
        let ctx = ctx_with(64, cfg.d_model, 64, 2);
        let out = m.ibu.decoder.decode_all(&ctx).unwrap();
        assert_eq!(out.shape(), (64, cfg.d_model));
    }
}
