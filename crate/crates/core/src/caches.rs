//! Sliding-window state of the autoregressive loop.
//!
//! * one [`ChunkCache`] per party with the behavior tokens of the latest `c`
//!   frames,
//! * the [`ContextCache`] of compressed chunk summaries (capacity `w`),
//! * fixed-length [`FrameWindow`]s for recent agent audio, recent agent
//!   motion and recent fine-grained features.
//!
//! While a chunk is still filling, its summary is refreshed in place; a new
//! entry is only appended once the next chunk starts. The oldest summary is
//! evicted first when the context is full.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ibu::{BehaviorToken, Track};

/// `⌊t / c⌋`, the chunk containing frame `t`.
pub fn chunk_index(t: u64, c: usize) -> Result<u64> {
    if c == 0 {
        return Err(Error::config("chunk window must be at least 1"));
    }
    Ok(t / c as u64)
}

/// Behavior tokens of the most recent `window` frames for one party.
///
/// Frame indices are signed: the warm-up tokens written at session start
/// occupy `-window..0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkCache {
    pub(crate) track: Track,
    pub(crate) window: usize,
    pub(crate) tokens: VecDeque<BehaviorToken>,
}

impl ChunkCache {
    pub fn new(track: Track, window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::config("chunk window must be at least 1"));
        }
        Ok(ChunkCache {
            track,
            window,
            tokens: VecDeque::with_capacity(window + 1),
        })
    }

    pub fn track(&self) -> Track {
        self.track
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn last_frame(&self) -> Option<i64> {
        self.tokens.back().map(|t| t.frame_index)
    }

    pub fn frames(&self) -> impl Iterator<Item = i64> + '_ {
        self.tokens.iter().map(|t| t.frame_index)
    }

    pub fn tokens(&self) -> impl Iterator<Item = &BehaviorToken> {
        self.tokens.iter()
    }

    /// Appends the token for frame `token.frame_index`, evicting the oldest
    /// when the window is exceeded.
    pub fn push(&mut self, token: BehaviorToken) -> Result<()> {
        if token.track != self.track {
            return Err(Error::validation(format!(
                "{:?} token pushed into the {:?} chunk cache",
                token.track, self.track
            )));
        }
        if let Some(last) = self.last_frame() {
            if token.frame_index != last + 1 {
                return Err(Error::sequencing(format!(
                    "chunk cache expected frame {}, got {}",
                    last + 1,
                    token.frame_index
                )));
            }
        }
        self.tokens.push_back(token);
        while self.tokens.len() > self.window {
            self.tokens.pop_front();
        }
        Ok(())
    }

    fn heap_bytes(&self) -> usize {
        self.tokens.capacity() * core::mem::size_of::<BehaviorToken>()
            + self
                .tokens
                .iter()
                .map(|t| t.vector.capacity() * 4)
                .sum::<usize>()
    }
}

/// Compressed interaction summary of one chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkSummary {
    pub chunk_index: u64,
    pub vector: Vec<f32>,
    /// True once every frame of the chunk has contributed.
    pub complete: bool,
}

/// What [`ContextCache::upsert`] did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Upsert {
    Refreshed,
    Appended,
    /// Appended and the oldest entry was dropped; slot positions shifted.
    Evicted,
}

/// Long-range context: chunk summaries with strictly increasing indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextCache {
    pub(crate) capacity: usize,
    pub(crate) entries: VecDeque<ChunkSummary>,
}

impl ContextCache {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("context capacity must be at least 1"));
        }
        Ok(ContextCache {
            capacity,
            entries: VecDeque::with_capacity(capacity + 1),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &ChunkSummary> + ExactSizeIterator {
        self.entries.iter()
    }

    pub fn newest(&self) -> Option<&ChunkSummary> {
        self.entries.back()
    }

    /// Refreshes the newest entry in place when the chunk index matches,
    /// otherwise appends (FIFO eviction beyond capacity).
    pub fn upsert(&mut self, s: ChunkSummary) -> Result<Upsert> {
        let Some(newest) = self.entries.back_mut() else {
            self.entries.push_back(s);
            return Ok(Upsert::Appended);
        };
        if s.chunk_index < newest.chunk_index {
            return Err(Error::sequencing(format!(
                "summary for chunk {} arrived after chunk {}",
                s.chunk_index, newest.chunk_index
            )));
        }
        if s.chunk_index == newest.chunk_index {
            if newest.complete && !s.complete {
                return Err(Error::sequencing(format!(
                    "chunk {} is already complete",
                    s.chunk_index
                )));
            }
            *newest = s;
            return Ok(Upsert::Refreshed);
        }
        if !newest.complete {
            return Err(Error::sequencing(format!(
                "chunk {} appended while chunk {} is incomplete",
                s.chunk_index, newest.chunk_index
            )));
        }
        self.entries.push_back(s);
        if self.entries.len() > self.capacity {
            self.entries.pop_front();
            return Ok(Upsert::Evicted);
        }
        Ok(Upsert::Appended)
    }

    fn heap_bytes(&self) -> usize {
        self.entries.capacity() * core::mem::size_of::<ChunkSummary>()
            + self
                .entries
                .iter()
                .map(|e| e.vector.capacity() * 4)
                .sum::<usize>()
    }
}

/// Fixed-capacity window of equally sized vectors, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameWindow {
    pub(crate) capacity: usize,
    pub(crate) dim: usize,
    pub(crate) items: VecDeque<Vec<f32>>,
}

impl FrameWindow {
    pub fn new(capacity: usize, dim: usize) -> Self {
        FrameWindow {
            capacity,
            dim,
            items: VecDeque::with_capacity(capacity + 1),
        }
    }

    /// A window filled with `capacity` copies of `v`.
    pub fn repeated(capacity: usize, v: &[f32]) -> Self {
        let mut w = Self::new(capacity, v.len());
        for _ in 0..capacity {
            w.items.push_back(v.to_vec());
        }
        w
    }

    pub fn push(&mut self, v: Vec<f32>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::validation(format!(
                "window entry of length {}, expected {}",
                v.len(),
                self.dim
            )));
        }
        self.items.push_back(v);
        while self.items.len() > self.capacity {
            self.items.pop_front();
        }
        Ok(())
    }

    pub fn replace_newest(&mut self, v: Vec<f32>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::validation(format!(
                "window entry of length {}, expected {}",
                v.len(),
                self.dim
            )));
        }
        match self.items.back_mut() {
            Some(b) => *b = v,
            None => self.items.push_back(v),
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize) -> Option<&[f32]> {
        self.items.get(i).map(|v| v.as_slice())
    }

    pub fn newest(&self) -> Option<&[f32]> {
        self.items.back().map(|v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f32]> {
        self.items.iter().map(|v| v.as_slice())
    }

    /// All `capacity` slots, left-padded by repeating the oldest entry.
    pub fn padded(&self) -> Vec<&[f32]> {
        let Some(first) = self.items.front() else {
            return Vec::new();
        };
        let pad = self.capacity.saturating_sub(self.items.len());
        core::iter::repeat(first.as_slice())
            .take(pad)
            .chain(self.iter())
            .collect()
    }

    fn heap_bytes(&self) -> usize {
        self.items.capacity() * core::mem::size_of::<Vec<f32>>()
            + self.items.iter().map(|v| v.capacity() * 4).sum::<usize>()
    }
}

/// Every cache a session owns.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheSet {
    pub agent: ChunkCache,
    pub user: ChunkCache,
    pub context: ContextCache,
    /// Agent audio of frames `T-2..=T`.
    pub audio: FrameWindow,
    /// Agent motion of frames `T-5..=T-1`.
    pub motion: FrameWindow,
    /// Fine-grained PMP features of frames `T-4..=T`.
    pub fine: FrameWindow,
}

impl CacheSet {
    /// Approximate heap footprint, used to check that memory stays bounded
    /// by the window sizes rather than by stream length.
    pub fn heap_bytes(&self) -> usize {
        self.agent.heap_bytes()
            + self.user.heap_bytes()
            + self.context.heap_bytes()
            + self.audio.heap_bytes()
            + self.motion.heap_bytes()
            + self.fine.heap_bytes()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn tok(track: Track, t: i64) -> BehaviorToken {
        BehaviorToken {
            vector: vec![t as f32; 4],
            track,
            frame_index: t,
        }
    }

    fn summary(i: u64, complete: bool) -> ChunkSummary {
        ChunkSummary {
            chunk_index: i,
            vector: vec![i as f32; 4],
            complete,
        }
    }

    #[test]
    fn chunk_index_table() {
        assert_eq!(chunk_index(0, 6).unwrap(), 0);
        assert_eq!(chunk_index(5, 6).unwrap(), 0);
        assert_eq!(chunk_index(6, 6).unwrap(), 1);
        assert_eq!(chunk_index(13, 6).unwrap(), 2);
        assert!(matches!(chunk_index(3, 0), Err(Error::Config(_))));
    }

    #[test]
    fn chunk_cache_slides() {
        let mut c = ChunkCache::new(Track::Agent, 6).unwrap();
        c.push(tok(Track::Agent, 0)).unwrap();
        assert_eq!(c.len(), 1);
        for t in 1..=5 {
            c.push(tok(Track::Agent, t)).unwrap();
        }
        c.push(tok(Track::Agent, 6)).unwrap();
        assert_eq!(c.frames().collect::<Vec<_>>(), vec![1, 2, 3, 4, 5, 6]);
        assert!(matches!(
            c.push(tok(Track::Agent, 3)),
            Err(Error::Sequencing(_))
        ));
        assert!(c.push(tok(Track::User, 7)).is_err());
    }

    #[test]
    fn context_refresh_in_place() {
        let mut ctx = ContextCache::new(512).unwrap();
        ctx.upsert(summary(0, true)).unwrap();
        assert_eq!(ctx.upsert(summary(1, false)).unwrap(), Upsert::Appended);
        assert_eq!(ctx.upsert(summary(1, false)).unwrap(), Upsert::Refreshed);
        assert_eq!(ctx.upsert(summary(1, true)).unwrap(), Upsert::Refreshed);
        assert_eq!(ctx.len(), 2);
        assert!(ctx.newest().unwrap().complete);
        assert_eq!(
            ctx.entries().map(|e| e.chunk_index).collect::<Vec<_>>(),
            vec![0, 1]
        );
    }

    #[test]
    fn context_fifo_eviction() {
        let mut ctx = ContextCache::new(2).unwrap();
        ctx.upsert(summary(0, true)).unwrap();
        ctx.upsert(summary(1, true)).unwrap();
        assert_eq!(ctx.upsert(summary(2, false)).unwrap(), Upsert::Evicted);
        assert_eq!(
            ctx.entries().map(|e| e.chunk_index).collect::<Vec<_>>(),
            vec![1, 2]
        );
    }

    #[test]
    fn context_rejects_regression() {
        let mut ctx = ContextCache::new(4).unwrap();
        ctx.upsert(summary(0, true)).unwrap();
        ctx.upsert(summary(1, false)).unwrap();
        assert!(matches!(
            ctx.upsert(summary(0, true)),
            Err(Error::Sequencing(_))
        ));
        assert!(matches!(
            ctx.upsert(summary(2, false)),
            Err(Error::Sequencing(_))
        ));
    }

    #[test]
    fn window_padding() {
        let mut w = FrameWindow::new(5, 1);
        assert!(w.padded().is_empty());
        w.push(vec![1.0]).unwrap();
        w.push(vec![2.0]).unwrap();
        let p: Vec<f32> = w.padded().iter().map(|v| v[0]).collect();
        assert_eq!(p, vec![1.0, 1.0, 1.0, 1.0, 2.0]);
        for i in 3..9 {
            w.push(vec![i as f32]).unwrap();
        }
        let p: Vec<f32> = w.padded().iter().map(|v| v[0]).collect();
        assert_eq!(p, vec![4.0, 5.0, 6.0, 7.0, 8.0]);
        w.replace_newest(vec![0.5]).unwrap();
        assert_eq!(w.newest().unwrap(), &[0.5]);
        assert!(w.push(vec![1.0, 2.0]).is_err());
    }
}
