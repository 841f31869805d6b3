//! Feature and motion streams (`ARGS`).
//!
//! ```text
//! magic "ARGS" | version u32 | fps u32
//! extractor_len u32 | extractor utf-8
//! reference_len u32 | f32×reference_len
//! track_count u32
//! track_count × { role u8 | has_energy u8 | audio_dim u32 | motion_dim u32 }
//! frame_count u64
//! frame_count × { frame_index u64 | per track: f32×audio_dim, f32×motion_dim, [f32 energy] }
//! crc32 u32
//! ```
//!
//! An interaction stream has an agent track (audio + energy) and a user track
//! (audio + motion + energy) and carries the agent's reference motion. A
//! motion stream, as written by `run`, has a single agent track with motion
//! only and no reference.

use std::path::Path;

use arig_core::engine::{lagged_inputs, FrameRecord, SessionInit};
use arig_core::{EngineConfig, FrameInput, MotionVector};

use super::{read_file, write_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"ARGS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Agent = 0,
    User = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrackSpec {
    pub role: Role,
    pub audio_dim: u32,
    pub motion_dim: u32,
    pub energy: bool,
}

impl TrackSpec {
    fn record_len(&self) -> usize {
        (self.audio_dim + self.motion_dim) as usize + self.energy as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamHeader {
    pub fps: u32,
    /// Name of the feature extractor the audio came from.
    pub extractor: String,
    pub reference: Vec<f32>,
    pub tracks: Vec<TrackSpec>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrackFrame {
    pub audio: Vec<f32>,
    pub motion: Vec<f32>,
    pub energy: Option<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamFile {
    pub header: StreamHeader,
    /// One entry per frame, one [`TrackFrame`] per track. Frame indices are
    /// implicit and contiguous from 0.
    pub frames: Vec<Vec<TrackFrame>>,
}

impl StreamFile {
    pub fn interaction(
        fps: u32,
        extractor: &str,
        reference: &MotionVector,
        records: &[FrameRecord],
    ) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::format("stream needs at least one frame"))?;
        let (audio_dim, motion_dim) = (first.agent_audio.len() as u32, reference.len() as u32);
        let header = StreamHeader {
            fps,
            extractor: extractor.to_string(),
            reference: reference.as_slice().to_vec(),
            tracks: vec![
                TrackSpec {
                    role: Role::Agent,
                    audio_dim,
                    motion_dim: 0,
                    energy: true,
                },
                TrackSpec {
                    role: Role::User,
                    audio_dim,
                    motion_dim,
                    energy: true,
                },
            ],
        };
        let frames = records
            .iter()
            .map(|r| {
                vec![
                    TrackFrame {
                        audio: r.agent_audio.clone(),
                        motion: Vec::new(),
                        energy: Some(r.agent_energy),
                    },
                    TrackFrame {
                        audio: r.user_audio.clone(),
                        motion: r.user_motion.clone(),
                        energy: Some(r.user_energy),
                    },
                ]
            })
            .collect();
        let s = StreamFile { header, frames };
        s.check()?;
        Ok(s)
    }

    pub fn motion(fps: u32, motion_dim: usize, motions: &[&[f32]]) -> Result<Self> {
        let header = StreamHeader {
            fps,
            extractor: String::new(),
            reference: Vec::new(),
            tracks: vec![TrackSpec {
                role: Role::Agent,
                audio_dim: 0,
                motion_dim: motion_dim as u32,
                energy: false,
            }],
        };
        let frames = motions
            .iter()
            .map(|m| {
                vec![TrackFrame {
                    motion: m.to_vec(),
                    ..Default::default()
                }]
            })
            .collect();
        let s = StreamFile { header, frames };
        s.check()?;
        Ok(s)
    }

    fn check(&self) -> Result<()> {
        for (t, frame) in self.frames.iter().enumerate() {
            if frame.len() != self.header.tracks.len() {
                return Err(Error::format(format!(
                    "frame {t} has {} tracks",
                    frame.len()
                )));
            }
            for (spec, f) in self.header.tracks.iter().zip(frame) {
                if f.audio.len() != spec.audio_dim as usize
                    || f.motion.len() != spec.motion_dim as usize
                    || f.energy.is_some() != spec.energy
                {
                    return Err(Error::format(format!(
                        "frame {t}: {:?} track does not match its header",
                        spec.role
                    )));
                }
            }
        }
        Ok(())
    }

    /// Reference motion and per-frame records of an interaction stream,
    /// without checking dimensions against an engine configuration.
    pub fn interaction_records(&self) -> Result<(Vec<f32>, Vec<FrameRecord>)> {
        let tracks = &self.header.tracks;
        let ok = tracks.len() == 2
            && tracks[0].role == Role::Agent
            && tracks[0].energy
            && tracks[1].role == Role::User
            && tracks[1].energy
            && tracks[1].motion_dim > 0;
        if !ok {
            return Err(Error::format("not an interaction stream (expected agent audio+energy and user audio+motion+energy tracks)"));
        }
        let records = self
            .frames
            .iter()
            .map(|f| FrameRecord {
                agent_audio: f[0].audio.clone(),
                agent_energy: f[0].energy.unwrap_or(0.0),
                user_audio: f[1].audio.clone(),
                user_motion: f[1].motion.clone(),
                user_energy: f[1].energy.unwrap_or(0.0),
            })
            .collect();
        Ok((self.header.reference.clone(), records))
    }

    /// [`interaction_records`](Self::interaction_records), checked against
    /// the dimensions of `cfg`.
    pub fn to_records(&self, cfg: &EngineConfig) -> Result<(MotionVector, Vec<FrameRecord>)> {
        let (reference, records) = self.interaction_records()?;
        let tracks = &self.header.tracks;
        let (audio, motion) = (tracks[0].audio_dim as usize, tracks[1].motion_dim as usize);
        if audio != cfg.audio_dim
            || tracks[1].audio_dim as usize != cfg.audio_dim
            || motion != cfg.motion_dim
        {
            return Err(Error::format(format!(
                "stream dimensions audio {audio}/{} motion {motion} do not match the configuration (audio {}, motion {})",
                tracks[1].audio_dim, cfg.audio_dim, cfg.motion_dim
            )));
        }
        if reference.len() != cfg.motion_dim {
            return Err(Error::format(format!(
                "reference motion has {} values, expected {}",
                reference.len(),
                cfg.motion_dim
            )));
        }
        Ok((MotionVector::new(reference, cfg.motion_dim)?, records))
    }

    /// Session initialization and lagged engine inputs for an interaction
    /// stream. The first agent audio frame seeds the pre-roll.
    pub fn session_inputs(
        &self,
        cfg: &EngineConfig,
        seed: u64,
    ) -> Result<(SessionInit, Vec<FrameInput>)> {
        let (reference, records) = self.to_records(cfg)?;
        let first_audio = records
            .first()
            .map(|r| r.agent_audio.clone())
            .ok_or_else(|| Error::format("interaction stream has no frames"))?;
        let init = SessionInit {
            reference_motion: reference,
            first_audio,
            seed,
        };
        let inputs = lagged_inputs(&records, &init);
        Ok((init, inputs))
    }

    pub fn encode(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = ByteWriter::new();
        out.bytes(&MAGIC);
        out.u32(VERSION);
        out.u32(h.fps);
        out.str(&h.extractor);
        out.u32(h.reference.len() as u32);
        out.f32s(&h.reference);
        out.u32(h.tracks.len() as u32);
        for t in &h.tracks {
            out.u8(t.role as u8);
            out.u8(t.energy as u8);
            out.u32(t.audio_dim);
            out.u32(t.motion_dim);
        }
        out.u64(self.frames.len() as u64);
        for (i, frame) in self.frames.iter().enumerate() {
            out.u64(i as u64);
            for f in frame {
                out.f32s(&f.audio);
                out.f32s(&f.motion);
                if let Some(e) = f.energy {
                    out.f32(e);
                }
            }
        }
        out.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (header, count, mut r) = read_header(bytes)?;
        let mut frames = Vec::with_capacity(count.min(1 << 20) as usize);
        for i in 0..count {
            let index = r.u64()?;
            if index != i {
                return Err(Error::format(format!(
                    "stream: frame {i} is labelled {index}"
                )));
            }
            let mut frame = Vec::with_capacity(header.tracks.len());
            for t in &header.tracks {
                let audio = r.f32s(t.audio_dim as usize)?;
                let motion = r.f32s(t.motion_dim as usize)?;
                let energy = if t.energy { Some(r.f32()?) } else { None };
                frame.push(TrackFrame {
                    audio,
                    motion,
                    energy,
                });
            }
            frames.push(frame);
        }
        r.finish()?;
        Ok(StreamFile { header, frames })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }
}

/// Header summary as shown by `inspect`.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamInfo {
    pub header: StreamHeader,
    pub frames: u64,
    pub bytes: usize,
}

fn read_header(bytes: &[u8]) -> Result<(StreamHeader, u64, ByteReader<'_>)> {
    let mut r = ByteReader::open(bytes, &MAGIC, "stream")?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            what: "stream",
            found: version,
        });
    }
    let fps = r.u32()?;
    let extractor = r.str()?;
    let n = r.u32()? as usize;
    let reference = r.f32s(n)?;
    let tracks_n = r.u32()?;
    if tracks_n == 0 || tracks_n > 2 {
        return Err(Error::format(format!("stream: {tracks_n} tracks")));
    }
    let mut tracks = Vec::new();
    for _ in 0..tracks_n {
        let role = match r.u8()? {
            0 => Role::Agent,
            1 => Role::User,
            v => return Err(Error::format(format!("stream: unknown track role {v}"))),
        };
        let energy = match r.u8()? {
            0 => false,
            1 => true,
            v => return Err(Error::format(format!("stream: invalid energy flag {v}"))),
        };
        let (audio_dim, motion_dim) = (r.u32()?, r.u32()?);
        tracks.push(TrackSpec {
            role,
            audio_dim,
            motion_dim,
            energy,
        });
    }
    let count = r.u64()?;
    let per_frame: usize = 8 + tracks.iter().map(|t| t.record_len() * 4).sum::<usize>();
    let remaining = bytes.len() - 4 - r.offset();
    if (count as u128) * (per_frame as u128) != remaining as u128 {
        return Err(Error::format(format!(
            "stream: {count} frames of {per_frame} bytes do not fill the {remaining} payload bytes"
        )));
    }
    Ok((
        StreamHeader {
            fps,
            extractor,
            reference,
            tracks,
        },
        count,
        r,
    ))
}

pub fn inspect(bytes: &[u8]) -> Result<StreamInfo> {
    let (header, frames, _) = read_header(bytes)?;
    // a full decode also validates the frame indices
    StreamFile::decode(bytes)?;
    Ok(StreamInfo {
        header,
        frames,
        bytes: bytes.len(),
    })
}
