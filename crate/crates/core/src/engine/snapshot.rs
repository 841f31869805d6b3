//! Binary session snapshots.
//!
//! Layout (little-endian): magic `ARSN`, `u32` version, then tagged
//! sections `[tag: 4 bytes][len: u32][payload]` in the order `CONF`,
//! `SESS`, `CACH`, then a CRC-32 of every preceding byte. The decoder key
//! cache is derived state and is rebuilt on the first step after restore.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use super::{DecodeMode, Session, SessionInit};
use crate::caches::{CacheSet, ChunkCache, ChunkSummary, ContextCache, FrameWindow};
use crate::config::EngineConfig;
use crate::csu::{FineState, VadTracker};
use crate::error::{Error, Result};
use crate::ibu::{BehaviorToken, DecoderKvCache, Track};
use crate::motion::MotionVector;
use crate::weights::Model;

pub const SNAPSHOT_MAGIC: [u8; 4] = *b"ARSN";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        self.u32(v.len() as u32);
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn section(&mut self, tag: &[u8; 4], body: Writer) {
        self.0.extend_from_slice(tag);
        self.u32(body.0.len() as u32);
        self.0.extend_from_slice(&body.0);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Snapshot(format!("truncated at byte {}", self.pos)));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().unwrap_or_default(),
        ))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().unwrap_or_default(),
        ))
    }
    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(
            self.take(8)?.try_into().unwrap_or_default(),
        ))
    }
    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Snapshot(format!("invalid flag byte {b}"))),
        }
    }
    fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.u32()? as usize;
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Snapshot("length overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }
    fn section(&mut self, tag: &[u8; 4]) -> Result<Reader<'a>> {
        let got = self.take(4)?;
        if got != tag {
            return Err(Error::Snapshot(format!(
                "expected section {}, found {:?}",
                String::from_utf8_lossy(tag),
                got
            )));
        }
        let len = self.u32()? as usize;
        Ok(Reader {
            buf: self.take(len)?,
            pos: 0,
        })
    }
    fn finish(&self, what: &str) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Snapshot(format!(
                "{} trailing bytes in {what}",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn shape_fields(cfg: &EngineConfig) -> [u32; 8] {
    [
        cfg.chunk as u32,
        cfg.context as u32,
        cfg.audio_dim as u32,
        cfg.motion_dim as u32,
        cfg.d_model as u32,
        cfg.audio_window as u32,
        cfg.temporal_window as u32,
        cfg.vad.window as u32,
    ]
}

fn put_window(w: &mut Writer, f: &FrameWindow) {
    w.u32(f.capacity as u32);
    w.u32(f.dim as u32);
    w.u32(f.items.len() as u32);
    for v in &f.items {
        w.f32s(v);
    }
}

fn get_window(r: &mut Reader<'_>, capacity: usize, dim: usize) -> Result<FrameWindow> {
    let (cap, d, n) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    if cap != capacity || d != dim || n > cap {
        return Err(Error::Snapshot(format!(
            "window {cap}x{d} with {n} items does not fit {capacity}x{dim}"
        )));
    }
    let mut w = FrameWindow::new(cap, d);
    for _ in 0..n {
        w.push(r.f32s()?)?;
    }
    Ok(w)
}

fn put_chunk(w: &mut Writer, c: &ChunkCache) {
    w.u32(c.tokens.len() as u32);
    for t in &c.tokens {
        w.i64(t.frame_index);
        w.f32s(&t.vector);
    }
}

fn get_chunk(r: &mut Reader<'_>, track: Track, window: usize, dim: usize) -> Result<ChunkCache> {
    let n = r.u32()? as usize;
    if n > window {
        return Err(Error::Snapshot(format!(
            "{n} tokens exceed chunk window {window}"
        )));
    }
    let mut c = ChunkCache::new(track, window)?;
    for _ in 0..n {
        let frame_index = r.i64()?;
        let vector = r.f32s()?;
        if vector.len() != dim {
            return Err(Error::Snapshot(format!("token of length {}", vector.len())));
        }
        c.push(BehaviorToken {
            vector,
            track,
            frame_index,
        })?;
    }
    Ok(c)
}

fn put_vad(w: &mut Writer, v: &VadTracker) {
    w.u32(v.hangover_left as u32);
    let e: Vec<f32> = v.energies.iter().copied().collect();
    w.f32s(&e);
}

fn get_vad(r: &mut Reader<'_>, cfg: &EngineConfig) -> Result<VadTracker> {
    let hangover = r.u32()? as usize;
    let energies = r.f32s()?;
    if energies.len() > cfg.vad.window || hangover > cfg.vad.hangover {
        return Err(Error::Snapshot("vad tracker state out of range".into()));
    }
    Ok(VadTracker::from_parts(cfg.vad, energies, hangover))
}

/// Checks the trailer, magic and version, returning a reader over the
/// sections.
fn open(bytes: &[u8]) -> Result<Reader<'_>> {
    if bytes.len() < 12 {
        return Err(Error::Snapshot("too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    if crc32fast::hash(body) != stored {
        return Err(Error::Snapshot("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != SNAPSHOT_MAGIC {
        return Err(Error::Snapshot("bad magic".into()));
    }
    let version = r.u32()?;
    if version != SNAPSHOT_VERSION {
        return Err(Error::Snapshot(format!("unsupported version {version}")));
    }
    Ok(r)
}

/// The model-independent part of a snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotHeader {
    pub version: u32,
    pub chunk: u32,
    pub context: u32,
    pub audio_dim: u32,
    pub motion_dim: u32,
    pub d_model: u32,
    pub audio_window: u32,
    pub temporal_window: u32,
    pub vad_window: u32,
    pub frame: u64,
    pub state: FineState,
    pub seed: u64,
    pub poisoned: bool,
    /// Byte length of each section payload, in file order.
    pub sections: [([u8; 4], u32); 3],
}

/// Validates framing and checksum and decodes the header fields without
/// needing a model.
pub fn read_header(bytes: &[u8]) -> Result<SnapshotHeader> {
    let mut r = open(bytes)?;
    let mut conf = r.section(b"CONF")?;
    let mut f = [0u32; 8];
    for v in &mut f {
        *v = conf.u32()?;
    }
    conf.finish("CONF")?;
    let conf_len = conf.buf.len() as u32;
    let mut s = r.section(b"SESS")?;
    let frame = s.u64()?;
    let state = FineState::from_index(s.u8()? as usize)
        .ok_or_else(|| Error::Snapshot("invalid state index".into()))?;
    let seed = s.u64()?;
    let _decode_full = s.bool()?;
    let _emit_cis = s.bool()?;
    let poisoned = s.bool()?;
    let sess_len = s.buf.len() as u32;
    let c = r.section(b"CACH")?;
    r.finish("snapshot")?;
    Ok(SnapshotHeader {
        version: SNAPSHOT_VERSION,
        chunk: f[0],
        context: f[1],
        audio_dim: f[2],
        motion_dim: f[3],
        d_model: f[4],
        audio_window: f[5],
        temporal_window: f[6],
        vad_window: f[7],
        frame,
        state,
        seed,
        poisoned,
        sections: [
            (*b"CONF", conf_len),
            (*b"SESS", sess_len),
            (*b"CACH", c.buf.len() as u32),
        ],
    })
}

impl Session {
    /// Serializes every piece of session state.
    pub fn snapshot(&self) -> Result<Vec<u8>> {
        let cfg = &self.model.config;
        let mut out = Writer::default();
        out.0.extend_from_slice(&SNAPSHOT_MAGIC);
        out.u32(SNAPSHOT_VERSION);

        let mut conf = Writer::default();
        for v in shape_fields(cfg) {
            conf.u32(v);
        }
        out.section(b"CONF", conf);

        let mut sess = Writer::default();
        sess.u64(self.t);
        sess.u8(self.state.index() as u8);
        sess.u64(self.init.seed);
        sess.u8(matches!(self.decode_mode, DecodeMode::Full) as u8);
        sess.u8(self.emit_cis as u8);
        sess.u8(self.poisoned as u8);
        sess.f32s(self.init.reference_motion.as_slice());
        sess.f32s(&self.init.first_audio);
        put_vad(&mut sess, &self.vad_agent);
        put_vad(&mut sess, &self.vad_user);
        out.section(b"SESS", sess);

        let c = &self.caches;
        let mut cach = Writer::default();
        put_chunk(&mut cach, &c.agent);
        put_chunk(&mut cach, &c.user);
        cach.u32(c.context.entries.len() as u32);
        for e in &c.context.entries {
            cach.u64(e.chunk_index);
            cach.u8(e.complete as u8);
            cach.f32s(&e.vector);
        }
        put_window(&mut cach, &c.audio);
        put_window(&mut cach, &c.motion);
        put_window(&mut cach, &c.fine);
        out.section(b"CACH", cach);

        let crc = crc32fast::hash(&out.0);
        out.u32(crc);
        Ok(out.0)
    }

    /// Rebuilds a session from [`snapshot`](Self::snapshot) bytes. The
    /// model must have the same shape as the one the snapshot came from.
    pub fn restore(model: Arc<Model>, bytes: &[u8]) -> Result<Session> {
        let mut r = open(bytes)?;
        let cfg = model.config.clone();

        let mut conf = r.section(b"CONF")?;
        for (i, want) in shape_fields(&cfg).into_iter().enumerate() {
            let got = conf.u32()?;
            if got != want {
                return Err(Error::Snapshot(format!(
                    "configuration field {i} is {got} in the snapshot but {want} in the model"
                )));
            }
        }
        conf.finish("CONF")?;

        let mut s = r.section(b"SESS")?;
        let t = s.u64()?;
        let state = FineState::from_index(s.u8()? as usize)
            .ok_or_else(|| Error::Snapshot("invalid state index".into()))?;
        let seed = s.u64()?;
        let decode_mode = if s.bool()? {
            DecodeMode::Full
        } else {
            DecodeMode::Incremental
        };
        let emit_cis = s.bool()?;
        let poisoned = s.bool()?;
        let reference_motion = MotionVector::new(s.f32s()?, cfg.motion_dim)?;
        let first_audio = s.f32s()?;
        if first_audio.len() != cfg.audio_dim {
            return Err(Error::Snapshot("first audio has the wrong length".into()));
        }
        let vad_agent = get_vad(&mut s, &cfg)?;
        let vad_user = get_vad(&mut s, &cfg)?;
        s.finish("SESS")?;

        let mut c = r.section(b"CACH")?;
        let agent = get_chunk(&mut c, Track::Agent, cfg.chunk, cfg.d_model)?;
        let user = get_chunk(&mut c, Track::User, cfg.chunk, cfg.d_model)?;
        let n = c.u32()? as usize;
        if n > cfg.context {
            return Err(Error::Snapshot(format!(
                "{n} context entries exceed capacity"
            )));
        }
        let mut entries = VecDeque::with_capacity(cfg.context + 1);
        for _ in 0..n {
            let chunk_index = c.u64()?;
            let complete = c.bool()?;
            let vector = c.f32s()?;
            if vector.len() != cfg.d_model {
                return Err(Error::Snapshot("context entry has the wrong length".into()));
            }
            entries.push_back(ChunkSummary {
                chunk_index,
                vector,
                complete,
            });
        }
        let mut context = ContextCache::new(cfg.context)?;
        context.entries = entries;
        let audio = get_window(&mut c, cfg.audio_window, cfg.audio_dim)?;
        let motion = get_window(&mut c, cfg.temporal_window, cfg.motion_dim)?;
        let fine = get_window(&mut c, cfg.temporal_window, cfg.d_model)?;
        c.finish("CACH")?;
        r.finish("snapshot")?;

        Ok(Session {
            model,
            init: SessionInit {
                reference_motion,
                first_audio,
                seed,
            },
            caches: CacheSet {
                agent,
                user,
                context,
                audio,
                motion,
                fine,
            },
            kv: DecoderKvCache::default(),
            vad_agent,
            vad_user,
            state,
            t,
            poisoned,
            decode_mode,
            emit_cis,
        })
    }
}

/// Sessions compare equal when all state except the model handle and the
/// derived decoder key cache matches.
impl PartialEq for Session {
    fn eq(&self, o: &Self) -> bool {
        self.init == o.init
            && self.caches == o.caches
            && self.vad_agent == o.vad_agent
            && self.vad_user == o.vad_user
            && self.state == o.state
            && self.t == o.t
            && self.poisoned == o.poisoned
            && self.decode_mode == o.decode_mode
            && self.emit_cis == o.emit_cis
            && self.model.config == o.model.config
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::fixture;
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let (model, init, inputs) = fixture(20, 11);
        let mut s = Session::new(model.clone(), init).unwrap();
        s.run_stream(&inputs[..13]).unwrap();
        let bytes = s.snapshot().unwrap();
        let back = Session::restore(model, &bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.snapshot().unwrap(), bytes);
    }

    #[test]
    fn header_reads_without_a_model() {
        let (model, init, inputs) = fixture(8, 15);
        let mut s = Session::new(model, init).unwrap();
        s.run_stream(&inputs).unwrap();
        let bytes = s.snapshot().unwrap();
        let h = read_header(&bytes).unwrap();
        assert_eq!(
            (h.frame, h.state, h.seed, h.chunk, h.context),
            (8, s.state(), 42, 3, 16)
        );
        let total: usize = h.sections.iter().map(|(_, n)| *n as usize + 8).sum();
        assert_eq!(total + 12, bytes.len());
    }

    #[test]
    fn resume_reproduces_outputs() {
        let (model, init, inputs) = fixture(30, 12);
        let mut s = Session::new(model.clone(), init).unwrap();
        let all = s.run_stream(&inputs).unwrap();
        let mut s = Session::new(model.clone(), s.init().clone()).unwrap();
        s.run_stream(&inputs[..17]).unwrap();
        let mut resumed = Session::restore(model, &s.snapshot().unwrap()).unwrap();
        assert_eq!(resumed.run_stream(&inputs[17..]).unwrap(), all[17..]);
    }

    #[test]
    fn corruption_is_detected() {
        let (model, init, _) = fixture(0, 13);
        let s = Session::new(model.clone(), init).unwrap();
        let mut bytes = s.snapshot().unwrap();
        bytes[20] ^= 1;
        assert!(matches!(
            Session::restore(model.clone(), &bytes),
            Err(Error::Snapshot(_))
        ));
        assert!(matches!(
            Session::restore(model, &bytes[..8]),
            Err(Error::Snapshot(_))
        ));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (model, init, _) = fixture(0, 14);
        let bytes = Session::new(model, init).unwrap().snapshot().unwrap();
        let mut cfg = EngineConfig::small();
        cfg.context = 32;
        let other = Model::init(&cfg, 1, crate::weights::InitMode::Random)
            .unwrap()
            .shared();
        assert!(matches!(
            Session::restore(other, &bytes),
            Err(Error::Snapshot(_))
        ));
    }
}
