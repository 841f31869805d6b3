use std::io::{BufRead, BufReader, Cursor, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use arig::core::{EngineConfig, InitMode, Model};
use arig::formats::stream::StreamFile;
use arig::gateway::server::run_connection;
use arig::gateway::{
    drive_lines, stream_lines, transcript, DriveOptions, Encoding, Pace, Server, ServerOptions,
};
use arig::synth::{generate, Script};

fn model() -> Arc<Model> {
    Model::init(&EngineConfig::small(), 7, InitMode::Random)
        .unwrap()
        .shared()
}

fn fixture(script: &str) -> StreamFile {
    let s = generate(&Script::parse(script).unwrap(), &EngineConfig::small()).unwrap();
    StreamFile::interaction(s.fps, arig::synth::EXTRACTOR, &s.reference, &s.records).unwrap()
}

const SESSION_SCRIPT: &str = r#"{"seed":3,"segments":[
    {"speaker":"agent","duration":0.6},
    {"speaker":"user","duration":0.6,"overlap":0.2},
    {"speaker":"none","duration":0.4}]}"#;

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

/// Compares against a committed file, or rewrites it when `ARIG_BLESS` is set.
fn check_golden(name: &str, actual: &str) {
    let path = golden(name);
    if std::env::var_os("ARIG_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected =
        std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    if expected != actual {
        let line = expected
            .lines()
            .zip(actual.lines())
            .position(|(a, b)| a != b);
        panic!("{name} differs from the golden file (first differing line {line:?})");
    }
}

fn session_opts() -> DriveOptions {
    DriveOptions {
        pace: Pace::Firehose,
        seed: 11,
        motion_dims: Some(4),
        ..Default::default()
    }
}

fn error_lines() -> Vec<String> {
    let cfg = EngineConfig::small();
    let v = |n: usize, x: f32| format!("{:?}", vec![x; n]);
    let frame = |t: u64, audio: usize, extra: &str| {
        format!(
            r#"{{"type":"frame_in","frame_index":{t},"agent_audio":{},"user_audio":{},"user_motion":{},"agent_energy":0.3,"user_energy":0.0{extra}}}"#,
            v(audio, 0.25),
            v(cfg.audio_dim, -0.5),
            v(cfg.motion_dim, 0.5)
        )
    };
    vec![
        r#"{"type":"hello","version":1,"encoding":"base64"}"#.to_string(),
        frame(0, cfg.audio_dim, ""),
        format!(
            r#"{{"type":"config","seed":2,"reference_motion":{},"first_audio":{},"motion_dims":3}}"#,
            v(cfg.motion_dim, 0.5),
            v(cfg.audio_dim, 0.0)
        ),
        frame(0, cfg.audio_dim, ""),
        frame(2, cfg.audio_dim, ""),
        frame(1, 3, ""),
        frame(
            1,
            cfg.audio_dim,
            r#","vad_override":{"agent":false,"user":true},"full_motion":true"#,
        ),
        "{oops".to_string(),
        frame(2, cfg.audio_dim, ""),
    ]
}

#[test]
fn golden_session_transcript() {
    let input: String = stream_lines(&fixture(SESSION_SCRIPT), &session_opts())
        .unwrap()
        .iter()
        .map(|l| l.clone() + "\n")
        .collect();
    check_golden("session.in.ndjson", &input);

    let server = Server::bind("127.0.0.1:0", model(), ServerOptions::default())
        .unwrap()
        .spawn();
    let canned = std::fs::read_to_string(golden("session.in.ndjson")).unwrap();
    let lines: Vec<String> = canned.lines().map(String::from).collect();
    let frames = lines.len() as u64 - 3;
    let report = drive_lines(server.addr(), lines, &session_opts()).unwrap();
    assert!(report.complete, "{:?}", report.failure);
    assert_eq!(report.frame_outs, frames);
    let masked = transcript::mask(&report.transcript);
    transcript::validate(&masked).unwrap();
    check_golden("session.out.ndjson", &masked);
    server.shutdown();
}

#[test]
fn golden_error_transcript() {
    let server = Server::bind("127.0.0.1:0", model(), ServerOptions::default())
        .unwrap()
        .spawn();
    let report = drive_lines(server.addr(), error_lines(), &session_opts()).unwrap();
    assert!(!report.complete);
    assert_eq!(report.frame_outs, 2);
    let masked = transcript::mask(&report.transcript);
    let summary = transcript::validate(&masked).unwrap();
    assert_eq!(summary.errors, 4);
    check_golden("errors.out.ndjson", &masked);
    server.shutdown();
}

#[test]
fn concurrent_sessions_are_independent() {
    let server = Server::bind("127.0.0.1:0", model(), ServerOptions::default())
        .unwrap()
        .spawn();
    let lines = stream_lines(&fixture(SESSION_SCRIPT), &session_opts()).unwrap();
    let other = stream_lines(
        &fixture(r#"{"seed":9,"segments":[{"speaker":"user","duration":1.2}]}"#),
        &DriveOptions {
            seed: 4,
            ..session_opts()
        },
    )
    .unwrap();
    let addr = server.addr();
    let runs: Vec<_> = [lines.clone(), other, lines.clone()]
        .into_iter()
        .map(|l| std::thread::spawn(move || drive_lines(addr, l, &session_opts()).unwrap()))
        .collect();
    let reports: Vec<_> = runs.into_iter().map(|h| h.join().unwrap()).collect();
    assert!(reports.iter().all(|r| r.complete));
    assert_eq!(
        transcript::mask(&reports[0].transcript),
        transcript::mask(&reports[2].transcript)
    );
    assert_ne!(
        transcript::digest(&reports[0].transcript),
        transcript::digest(&reports[1].transcript)
    );

    let alone = drive_lines(addr, lines, &session_opts()).unwrap();
    assert_eq!(
        transcript::digest(&alone.transcript),
        transcript::digest(&reports[0].transcript)
    );
    server.shutdown();
}

#[test]
fn real_time_drive_of_ten_seconds() {
    let stream = fixture(
        r#"{"seed":5,"segments":[{"speaker":"agent","duration":4},{"speaker":"user","duration":3,"overlap":0.5},{"speaker":"none","duration":3}]}"#,
    );
    assert_eq!(stream.frames.len(), 250);
    let server = Server::bind("127.0.0.1:0", model(), ServerOptions::default())
        .unwrap()
        .spawn();
    let opts = DriveOptions {
        pace: Pace::RealTime,
        encoding: Encoding::Base64,
        ..Default::default()
    };
    let report = arig::gateway::drive_stream(server.addr(), &stream, &opts).unwrap();
    assert!(report.complete);
    assert_eq!(report.frame_outs, 250);
    assert!(report.wall_s >= 9.9, "paced run took {} s", report.wall_s);
    let indices: Vec<u64> = report
        .transcript
        .iter()
        .filter_map(|l| match arig::gateway::Message::parse(l).unwrap() {
            arig::gateway::Message::FrameOut(f) => Some(f.frame_index),
            _ => None,
        })
        .collect();
    assert_eq!(indices, (0..250).collect::<Vec<_>>());
    assert!(report.p50_ms <= report.p95_ms);
    server.shutdown();
}

struct SlowWriter {
    out: Arc<Mutex<Vec<u8>>>,
    delayed: bool,
}

impl Write for SlowWriter {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        if !self.delayed {
            self.delayed = true;
            std::thread::sleep(Duration::from_millis(300));
        }
        self.out.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

#[test]
fn backpressure_closes_the_connection() {
    let mut lines = stream_lines(&fixture(SESSION_SCRIPT), &session_opts()).unwrap();
    lines.truncate(20);
    let input = lines.join("\n") + "\n";
    let out = Arc::new(Mutex::new(Vec::new()));
    let writer = SlowWriter {
        out: Arc::clone(&out),
        delayed: false,
    };
    let closes = Arc::new(Mutex::new(0));
    let counter = Arc::clone(&closes);
    run_connection(
        Cursor::new(input),
        Box::new(writer),
        model(),
        ServerOptions { queue_depth: 8 },
        move || *counter.lock().unwrap() += 1,
    );
    let text = String::from_utf8(out.lock().unwrap().clone()).unwrap();
    assert!(text.contains(r#""code":"backpressure""#), "{text}");
    assert_eq!(*closes.lock().unwrap(), 1);
    let frame_outs = text.matches(r#""type":"frame_out""#).count();
    assert!(
        frame_outs < 18,
        "{frame_outs} frames processed after the overflow"
    );
}

#[test]
fn connection_loss_gives_a_partial_transcript() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let fake = std::thread::spawn(move || {
        let (s, _) = listener.accept().unwrap();
        let mut r = BufReader::new(s.try_clone().unwrap());
        let mut w = s;
        let mut line = String::new();
        r.read_line(&mut line).unwrap();
        writeln!(w, r#"{{"type":"hello","version":1,"encoding":"json"}}"#).unwrap();
    });
    let lines = stream_lines(&fixture(SESSION_SCRIPT), &session_opts()).unwrap();
    let report = drive_lines(addr, lines, &session_opts()).unwrap();
    fake.join().unwrap();
    assert!(!report.complete);
    assert_eq!(report.transcript.len(), 1);
    assert!(report.failure.is_some());
}
