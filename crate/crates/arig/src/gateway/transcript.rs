//! Transcripts: the server's side of a session, one message per line.

use arig_core::csu::{FineState, NUM_STATES};

use super::protocol::Message;
use crate::error::{Error, Result};
use crate::trace::StageRecord;

/// Zeroes the timing fields of a `frame_out` line. Other lines, and lines
/// that do not parse, are returned unchanged.
pub fn mask_line(line: &str) -> String {
    match Message::parse(line) {
        Ok(Message::FrameOut(mut f)) => {
            f.latency_micros = 0;
            f.stages = StageRecord::default();
            Message::FrameOut(f).to_line()
        }
        _ => line.to_string(),
    }
}

/// Masked transcript text, newline terminated.
pub fn mask(lines: &[String]) -> String {
    lines.iter().map(|l| mask_line(l) + "\n").collect()
}

/// CRC-32 of the masked transcript, as 8 hex digits.
pub fn digest(lines: &[String]) -> String {
    format!("{:08x}", crc32fast::hash(mask(lines).as_bytes()))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Summary {
    pub frame_outs: u64,
    pub errors: u64,
    pub state_changes: u64,
    pub ended_with_bye: bool,
}

/// Checks that `text` is a well-formed server transcript: every line a
/// server message, `hello` first, `frame_out` indices strictly increasing,
/// states and probability vectors well formed.
pub fn validate(text: &str) -> Result<Summary> {
    let mut s = Summary::default();
    let mut last_frame: Option<u64> = None;
    for (n, line) in text.lines().enumerate() {
        let n = n + 1;
        let bad = |msg: String| Error::format(format!("transcript line {n}: {msg}"));
        if s.ended_with_bye {
            return Err(bad("message after bye".into()));
        }
        let m = Message::parse(line).map_err(|e| bad(e.to_string()))?;
        if n == 1 && !matches!(m, Message::Hello { .. }) {
            return Err(bad(format!("expected hello first, got {}", m.kind())));
        }
        match m {
            Message::Hello { .. } if n != 1 => return Err(bad("repeated hello".into())),
            Message::Hello { .. } => {}
            Message::Config { .. } | Message::FrameIn(_) => {
                return Err(bad(format!("{} is a client message", m.kind())))
            }
            Message::FrameOut(f) => {
                if last_frame.is_some_and(|p| f.frame_index <= p) {
                    return Err(bad(format!(
                        "frame_out {} after {}",
                        f.frame_index,
                        last_frame.unwrap_or(0)
                    )));
                }
                last_frame = Some(f.frame_index);
                if FineState::from_index(f.state as usize).is_none() {
                    return Err(bad(format!("state index {} out of range", f.state)));
                }
                if f.state_probs.len() != NUM_STATES {
                    return Err(bad(format!(
                        "{} state probabilities, expected {NUM_STATES}",
                        f.state_probs.len()
                    )));
                }
                f.motion.decode().map_err(|e| bad(e.to_string()))?;
                s.frame_outs += 1;
            }
            Message::State { state, .. } => {
                if FineState::from_index(state as usize).is_none() {
                    return Err(bad(format!("state index {state} out of range")));
                }
                s.state_changes += 1;
            }
            Message::Error { .. } => s.errors += 1,
            Message::Bye { .. } => s.ended_with_bye = true,
        }
    }
    if text.trim().is_empty() {
        return Err(Error::format("empty transcript"));
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    const OUT: &str = r#"{"type":"frame_out","frame_index":0,"motion":[0.5],"state":3,"state_name":"listening","state_probs":[0.1,0.1,0.1,0.4,0.1,0.1,0.1],"vad":{"agent_active":false,"user_active":true,"coarse":"user_only"},"latency_micros":812,"stages":{"ibu":400,"csu":12,"pmp":200,"sampler":200},"denoiser_evals":15,"keypoint_violations":0}"#;

    #[test]
    fn masking_zeroes_timing_only() {
        let m = mask_line(OUT);
        assert!(m.contains(r#""latency_micros":0,"stages":{"ibu":0,"csu":0,"pmp":0,"sampler":0}"#));
        assert_eq!(m.replace("812", "0").len(), m.len());
        assert_eq!(mask_line(&m), m);
        assert_eq!(mask_line("not json"), "not json");
    }

    #[test]
    fn validation() {
        let hello = r#"{"type":"hello","version":1,"encoding":"json"}"#;
        let text = format!("{hello}\n{OUT}\n{}\n", r#"{"type":"bye","frames":1}"#);
        let s = validate(&text).unwrap();
        assert_eq!((s.frame_outs, s.ended_with_bye), (1, true));
        assert!(validate(&format!("{OUT}\n")).is_err());
        assert!(validate(&format!("{hello}\n{OUT}\n{OUT}\n")).is_err());
        let frame_in = r#"{"type":"frame_in","frame_index":0,"agent_audio":[],"user_audio":[],"user_motion":[],"agent_energy":0,"user_energy":0}"#;
        assert!(validate(&format!("{hello}\n{frame_in}\n")).is_err());
        assert!(validate("").is_err());
    }
}
