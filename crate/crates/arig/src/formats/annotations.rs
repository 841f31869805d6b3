//! State annotations: a text table with one line per frame.
//!
//! ```text
//! # arig state annotations v1
//! frame_index,agent_active,user_active,state_index
//! 0,0,1,3
//! ```

use std::fmt::Write as _;
use std::path::Path;

use arig_core::csu::{FineState, VadPair};

use crate::error::{Error, Result};

pub const HEADER: &str = "# arig state annotations v1";
const COLUMNS: &str = "frame_index,agent_active,user_active,state_index";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Annotation {
    pub frame_index: u64,
    pub agent_active: bool,
    pub user_active: bool,
    pub state: FineState,
}

impl Annotation {
    pub fn vad(&self) -> VadPair {
        VadPair::new(self.agent_active, self.user_active)
    }

    /// The state sits under the coarse category of the activity pair.
    pub fn is_consistent(&self) -> bool {
        self.state.coarse_parent() == self.vad().coarse
    }
}

pub fn encode(rows: &[Annotation]) -> String {
    let mut out = format!("{HEADER}\n{COLUMNS}\n");
    for a in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            a.frame_index,
            a.agent_active as u8,
            a.user_active as u8,
            a.state.index()
        );
    }
    out
}

pub fn decode(text: &str) -> Result<Vec<Annotation>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == HEADER => {}
        _ => {
            return Err(Error::format(format!(
                "annotations: first line must be `{HEADER}`"
            )))
        }
    }
    match lines.next() {
        Some((_, l)) if l.trim() == COLUMNS => {}
        _ => {
            return Err(Error::format(format!(
                "annotations: second line must be `{COLUMNS}`"
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::format(format!("annotations line {}: {what}", i + 1));
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        let frame_index: u64 = f[0].parse().map_err(|_| bad("invalid frame index"))?;
        if frame_index != rows.len() as u64 {
            return Err(bad(&format!("frame {frame_index} out of sequence")));
        }
        let flag = |s: &str| match s {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(bad("activity must be 0 or 1")),
        };
        let state = f[3]
            .parse::<usize>()
            .ok()
            .and_then(FineState::from_index)
            .ok_or_else(|| bad("state index must be 0..6"))?;
        rows.push(Annotation {
            frame_index,
            agent_active: flag(f[1])?,
            user_active: flag(f[2])?,
            state,
        });
    }
    Ok(rows)
}

/// Frames whose state is not under the coarse category of their activity
/// pair. Inconsistency is reported, not rejected.
pub fn inconsistent_frames(rows: &[Annotation]) -> Vec<u64> {
    rows.iter()
        .filter(|a| !a.is_consistent())
        .map(|a| a.frame_index)
        .collect()
}

pub fn save(rows: &[Annotation], path: &Path) -> Result<()> {
    std::fs::write(path, encode(rows)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<Annotation>> {
    decode(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_consistency() {
        let rows = vec![
            Annotation {
                frame_index: 0,
                agent_active: false,
                user_active: true,
                state: FineState::Listening,
            },
            Annotation {
                frame_index: 1,
                agent_active: true,
                user_active: true,
                state: FineState::Speaking,
            },
        ];
        let text = encode(&rows);
        assert_eq!(text, format!("{HEADER}\n{COLUMNS}\n0,0,1,3\n1,1,1,0\n"));
        assert_eq!(decode(&text).unwrap(), rows);
        assert_eq!(inconsistent_frames(&rows), vec![1]);
    }

    #[test]
    fn rejects_malformed_rows() {
        let head = format!("{HEADER}\n{COLUMNS}\n");
        assert!(decode(&format!("{head}1,0,0,3\n")).is_err());
        assert!(decode(&format!("{head}0,2,0,3\n")).is_err());
        assert!(decode(&format!("{head}0,0,0,7\n")).is_err());
        assert!(decode(&format!("{COLUMNS}\n")).is_err());
    }
}
