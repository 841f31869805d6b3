//! Scripted client: replays a stream file against a server and records
//! the server's replies.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{channel, Receiver};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use super::protocol::{Encoding, Features, FrameIn, Message, PROTOCOL_VERSION};
use crate::bench::percentile;
use crate::error::{Error, Result};
use crate::formats::stream::StreamFile;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pace {
    /// One frame per frame period.
    RealTime,
    /// As fast as acknowledgements allow.
    Firehose,
}

#[derive(Debug, Clone)]
pub struct DriveOptions {
    pub pace: Pace,
    pub frame_period: Duration,
    /// Unacknowledged `frame_in` messages allowed at once.
    pub max_in_flight: usize,
    pub encoding: Encoding,
    pub seed: u64,
    pub motion_dims: Option<usize>,
    pub emit_cis: bool,
    /// Gives up when the server is silent this long.
    pub read_timeout: Duration,
}

impl Default for DriveOptions {
    fn default() -> Self {
        DriveOptions {
            pace: Pace::RealTime,
            frame_period: Duration::from_millis(40),
            max_in_flight: 4,
            encoding: Encoding::Json,
            seed: 0,
            motion_dims: None,
            emit_cis: false,
            read_timeout: Duration::from_secs(30),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct DriveReport {
    /// Server lines in arrival order.
    pub transcript: Vec<String>,
    pub frames_sent: u64,
    pub frame_outs: u64,
    pub errors: u64,
    /// Send-to-receive time of each `frame_out`, in microseconds.
    pub latencies_micros: Vec<u64>,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub wall_s: f64,
    /// The server answered `bye`.
    pub complete: bool,
    pub failure: Option<String>,
}

/// Client lines for a whole interaction stream: `hello`, `config`, one
/// `frame_in` per frame, `bye`.
pub fn stream_lines(stream: &StreamFile, opts: &DriveOptions) -> Result<Vec<String>> {
    let (reference, records) = stream.interaction_records()?;
    let first = records
        .first()
        .ok_or_else(|| Error::format("interaction stream has no frames"))?;
    let enc = opts.encoding;
    let mut lines = vec![
        Message::Hello {
            version: PROTOCOL_VERSION,
            encoding: enc,
        }
        .to_line(),
        Message::Config {
            seed: opts.seed,
            reference_motion: Features::encode(&reference, enc),
            first_audio: Features::encode(&first.agent_audio, enc),
            motion_dims: opts.motion_dims,
            emit_cis: opts.emit_cis,
        }
        .to_line(),
    ];
    for (t, r) in records.iter().enumerate() {
        let (ua, um, ue) = match t.checked_sub(1).map(|p| &records[p]) {
            Some(p) => (&p.user_audio[..], &p.user_motion[..], p.user_energy),
            None => (&first.agent_audio[..], &reference[..], 0.0),
        };
        let f = FrameIn {
            frame_index: t as u64,
            agent_audio: Features::encode(&r.agent_audio, enc),
            user_audio: Features::encode(ua, enc),
            user_motion: Features::encode(um, enc),
            agent_energy: r.agent_energy,
            user_energy: ue,
            vad_override: None,
            agent_motion: None,
            full_motion: false,
        };
        lines.push(Message::FrameIn(f).to_line());
    }
    lines.push(Message::Bye { frames: None }.to_line());
    Ok(lines)
}

fn frame_index_of(line: &str) -> Option<u64> {
    match Message::parse(line) {
        Ok(Message::FrameIn(f)) => Some(f.frame_index),
        _ => None,
    }
}

/// Sends `lines` in order and records replies until the server says `bye`
/// or closes. Fails only if the connection cannot be opened; a connection
/// lost midway yields a partial report with `complete` unset.
pub fn drive_lines(
    addr: impl ToSocketAddrs,
    lines: Vec<String>,
    opts: &DriveOptions,
) -> Result<DriveReport> {
    let stream = TcpStream::connect(addr).map_err(|e| Error::io("server address", e))?;
    let _ = stream.set_nodelay(true);
    stream
        .set_read_timeout(Some(opts.read_timeout))
        .map_err(|e| Error::io("server connection", e))?;
    let write_half = stream
        .try_clone()
        .map_err(|e| Error::io("server connection", e))?;
    let sent: Arc<Mutex<HashMap<u64, Instant>>> = Arc::default();
    let (ack_tx, ack_rx) = channel::<()>();
    let start = Instant::now();

    let writer = {
        let (sent, opts) = (Arc::clone(&sent), opts.clone());
        std::thread::spawn(move || write_lines(write_half, lines, &opts, &sent, ack_rx, start))
    };

    let mut report = DriveReport::default();
    let mut reader = BufReader::new(&stream);
    let mut line = String::new();
    loop {
        line.clear();
        match reader.read_line(&mut line) {
            Ok(0) => break,
            Ok(_) => {}
            Err(e) => {
                report.failure = Some(format!("read failed: {e}"));
                break;
            }
        }
        let text = line.trim_end_matches(['\n', '\r']).to_string();
        let now = Instant::now();
        match Message::parse(&text) {
            Ok(Message::FrameOut(f)) => {
                report.frame_outs += 1;
                if let Some(t) = sent
                    .lock()
                    .unwrap_or_else(|p| p.into_inner())
                    .remove(&f.frame_index)
                {
                    report
                        .latencies_micros
                        .push(now.duration_since(t).as_micros() as u64);
                }
                let _ = ack_tx.send(());
            }
            Ok(Message::Error { frame_index, .. }) => {
                report.errors += 1;
                if frame_index.is_some() {
                    let _ = ack_tx.send(());
                }
            }
            Ok(Message::Bye { .. }) => report.complete = true,
            _ => {}
        }
        report.transcript.push(text);
        if report.complete {
            break;
        }
    }
    drop(ack_tx);
    let _ = stream.shutdown(Shutdown::Both);
    report.frames_sent = writer.join().unwrap_or(0);
    report.wall_s = start.elapsed().as_secs_f64();
    if !report.complete
        && report.failure.is_none()
        && report.frame_outs + report.errors < report.frames_sent
    {
        report.failure = Some(format!(
            "connection closed after {} of {} frames",
            report.frame_outs + report.errors,
            report.frames_sent
        ));
    }
    let mut sorted = report.latencies_micros.clone();
    sorted.sort_unstable();
    report.p50_ms = percentile(&sorted, 50.0) as f64 / 1000.0;
    report.p95_ms = percentile(&sorted, 95.0) as f64 / 1000.0;
    Ok(report)
}

fn write_lines(
    mut out: TcpStream,
    lines: Vec<String>,
    opts: &DriveOptions,
    sent: &Mutex<HashMap<u64, Instant>>,
    acks: Receiver<()>,
    start: Instant,
) -> u64 {
    let mut frames = 0u64;
    let mut in_flight = 0usize;
    for line in lines {
        let frame = frame_index_of(&line);
        if frame.is_some() {
            while let Ok(()) = acks.try_recv() {
                in_flight -= 1;
            }
            while in_flight >= opts.max_in_flight.max(1) {
                if acks.recv().is_err() {
                    return frames;
                }
                in_flight -= 1;
            }
            if opts.pace == Pace::RealTime {
                let due = start + opts.frame_period * frames as u32;
                if let Some(wait) = due.checked_duration_since(Instant::now()) {
                    std::thread::sleep(wait);
                }
            }
        }
        if let Some(t) = frame {
            sent.lock()
                .unwrap_or_else(|p| p.into_inner())
                .insert(t, Instant::now());
        }
        if writeln!(out, "{line}").and_then(|_| out.flush()).is_err() {
            return frames;
        }
        if frame.is_some() {
            frames += 1;
            in_flight += 1;
        }
    }
    frames
}

/// [`stream_lines`] then [`drive_lines`].
pub fn drive_stream(
    addr: impl ToSocketAddrs,
    stream: &StreamFile,
    opts: &DriveOptions,
) -> Result<DriveReport> {
    drive_lines(addr, stream_lines(stream, opts)?, opts)
}
