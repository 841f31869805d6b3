//! TCP server speaking newline-delimited JSON. One reader thread and one
//! worker thread per connection; the worker owns the session.

use std::io::{BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{sync_channel, TrySendError};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use arig_core::csu::{FineState, INITIAL_STATE};
use arig_core::engine::SessionInit;
use arig_core::{Error as CoreError, FrameInput, Model, MotionVector, Session};

use super::protocol::{Encoding, ErrorCode, FrameIn, FrameOut, Message, PROTOCOL_VERSION};
use crate::bench::InstantClock;
use crate::error::{Error, Result};
use crate::trace::OutputRecord;

#[derive(Debug, Clone, Copy)]
pub struct ServerOptions {
    /// Inputs allowed to wait behind the frame being computed.
    pub queue_depth: usize,
}

impl Default for ServerOptions {
    fn default() -> Self {
        ServerOptions { queue_depth: 8 }
    }
}

/// Protocol state of one connection.
pub struct Connection {
    model: Arc<Model>,
    clock: InstantClock,
    encoding: Option<Encoding>,
    session: Option<Session>,
    motion_dims: Option<usize>,
    last_state: FineState,
}

/// Replies to one inbound line, and whether the connection must close.
pub struct Reply {
    pub messages: Vec<Message>,
    pub close: bool,
}

impl Reply {
    fn one(m: Message) -> Self {
        Reply {
            messages: vec![m],
            close: false,
        }
    }

    fn closing(m: Message) -> Self {
        Reply {
            messages: vec![m],
            close: true,
        }
    }
}

impl Connection {
    pub fn new(model: Arc<Model>) -> Self {
        Connection {
            model,
            clock: InstantClock::new(),
            encoding: None,
            session: None,
            motion_dims: None,
            last_state: INITIAL_STATE,
        }
    }

    pub fn handle(&mut self, line: &str) -> Reply {
        let msg = match Message::parse(line) {
            Ok(m) => m,
            Err(e) => {
                return Reply::closing(Message::error(ErrorCode::Malformed, e.to_string(), None))
            }
        };
        let Some(enc) = self.encoding else {
            return match msg {
                Message::Hello { version, encoding } => self.hello(version, encoding),
                other => Reply::closing(Message::error(
                    ErrorCode::Sequence,
                    format!("expected hello, got {}", other.kind()),
                    None,
                )),
            };
        };
        match msg {
            Message::Hello { .. } => Reply::one(Message::error(
                ErrorCode::Sequence,
                "hello already received",
                None,
            )),
            Message::Config {
                seed,
                reference_motion,
                first_audio,
                motion_dims,
                emit_cis,
            } => {
                if self.session.is_some() {
                    return Reply::one(Message::error(
                        ErrorCode::Sequence,
                        "session already configured",
                        None,
                    ));
                }
                let init = reference_motion.decode().and_then(|r| {
                    Ok(SessionInit {
                        reference_motion: MotionVector::new(r, self.model.config.motion_dim)?,
                        first_audio: first_audio.decode()?,
                        seed,
                    })
                });
                match init.and_then(|i| Ok(Session::new(Arc::clone(&self.model), i)?)) {
                    Ok(mut s) => {
                        s.emit_cis = emit_cis;
                        self.session = Some(s);
                        self.motion_dims = motion_dims;
                        Reply::one(state_message(None, INITIAL_STATE))
                    }
                    Err(e) => Reply::one(Message::error(
                        ErrorCode::InvalidConfig,
                        e.to_string(),
                        None,
                    )),
                }
            }
            Message::FrameIn(f) => self.frame(f, enc),
            Message::Bye { .. } => Reply::closing(Message::Bye {
                frames: Some(self.session.as_ref().map_or(0, |s| s.frame())),
            }),
            other => Reply::one(Message::error(
                ErrorCode::Sequence,
                format!("{} is sent by the server only", other.kind()),
                None,
            )),
        }
    }

    fn hello(&mut self, version: u32, encoding: Encoding) -> Reply {
        if version != PROTOCOL_VERSION {
            return Reply::closing(Message::error(
                ErrorCode::Version,
                format!("protocol version {version} is not supported (server speaks {PROTOCOL_VERSION})"),
                None,
            ));
        }
        self.encoding = Some(encoding);
        Reply::one(Message::Hello {
            version: PROTOCOL_VERSION,
            encoding,
        })
    }

    fn frame(&mut self, f: FrameIn, enc: Encoding) -> Reply {
        let idx = Some(f.frame_index);
        let Some(session) = self.session.as_mut() else {
            return Reply::one(Message::error(
                ErrorCode::Sequence,
                "frame_in before config",
                idx,
            ));
        };
        if f.frame_index != session.frame() {
            return Reply::one(Message::error(
                ErrorCode::FrameGap,
                format!("expected frame {}, got {}", session.frame(), f.frame_index),
                idx,
            ));
        }
        let input = match frame_input(&f) {
            Ok(i) => i,
            Err(e) => {
                return Reply::one(Message::error(ErrorCode::InvalidFrame, e.to_string(), idx))
            }
        };
        let out = match session.step_with_clock(&input, &self.clock) {
            Ok(o) => o,
            Err(e @ CoreError::Numeric { .. }) => {
                return Reply::closing(Message::error(ErrorCode::Numeric, e.to_string(), idx))
            }
            Err(e) => {
                return Reply::one(Message::error(ErrorCode::InvalidFrame, e.to_string(), idx))
            }
        };
        let dims = if f.full_motion {
            None
        } else {
            self.motion_dims
        };
        let record = OutputRecord::new(&out, dims);
        let mut messages = vec![Message::FrameOut(FrameOut::from_record(&record, enc))];
        if out.state != self.last_state {
            self.last_state = out.state;
            messages.push(state_message(idx, out.state));
        }
        Reply {
            messages,
            close: false,
        }
    }
}

fn state_message(frame_index: Option<u64>, s: FineState) -> Message {
    Message::State {
        frame_index,
        state: s.index() as u8,
        state_name: s.name().to_string(),
        coarse: s.coarse_parent().name().to_string(),
    }
}

fn frame_input(f: &FrameIn) -> Result<FrameInput> {
    let vad = f.vad_override.unwrap_or_default();
    Ok(FrameInput {
        frame_index: f.frame_index,
        agent_audio: f.agent_audio.decode()?,
        user_audio: f.user_audio.decode()?,
        user_motion: f.user_motion.decode()?,
        agent_energy: f.agent_energy,
        user_energy: f.user_energy,
        agent_motion: f.agent_motion.as_ref().map(|m| m.decode()).transpose()?,
        agent_vad: vad.agent,
        user_vad: vad.user,
    })
}

type SharedWriter = Arc<Mutex<Box<dyn Write + Send>>>;

fn send(w: &SharedWriter, messages: &[Message]) -> bool {
    let mut w = w.lock().unwrap_or_else(|p| p.into_inner());
    for m in messages {
        if writeln!(w, "{}", m.to_line()).is_err() {
            return false;
        }
    }
    w.flush().is_ok()
}

/// Runs one connection to completion. `close` is called once when the
/// server ends the connection.
pub fn run_connection<R: BufRead>(
    mut reader: R,
    writer: Box<dyn Write + Send>,
    model: Arc<Model>,
    opts: ServerOptions,
    close: impl Fn() + Send + Sync + 'static,
) {
    let writer: SharedWriter = Arc::new(Mutex::new(writer));
    let closed = Arc::new(AtomicBool::new(false));
    let close = Arc::new(close);
    let (tx, rx) = sync_channel::<String>(opts.queue_depth);

    let worker = {
        let (writer, closed, close) =
            (Arc::clone(&writer), Arc::clone(&closed), Arc::clone(&close));
        std::thread::spawn(move || {
            let mut conn = Connection::new(model);
            for line in rx {
                if closed.load(Ordering::SeqCst) {
                    break;
                }
                let reply = conn.handle(&line);
                if !send(&writer, &reply.messages) || reply.close {
                    closed.store(true, Ordering::SeqCst);
                    close();
                    break;
                }
            }
        })
    };

    let mut line = String::new();
    loop {
        line.clear();
        match reader.read_line(&mut line) {
            Ok(0) | Err(_) => break,
            Ok(_) => {}
        }
        if closed.load(Ordering::SeqCst) {
            break;
        }
        let text = line.trim_end_matches(['\n', '\r']);
        if text.trim().is_empty() {
            continue;
        }
        match tx.try_send(text.to_string()) {
            Ok(()) => {}
            Err(TrySendError::Full(_)) => {
                if !closed.swap(true, Ordering::SeqCst) {
                    let msg = format!("more than {} inputs queued", opts.queue_depth);
                    send(
                        &writer,
                        &[Message::error(ErrorCode::Backpressure, msg, None)],
                    );
                    close();
                }
                break;
            }
            Err(TrySendError::Disconnected(_)) => break,
        }
    }
    drop(tx);
    let _ = worker.join();
}

pub struct Server {
    listener: TcpListener,
    model: Arc<Model>,
    opts: ServerOptions,
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, model: Arc<Model>, opts: ServerOptions) -> Result<Self> {
        let listener = TcpListener::bind(addr).map_err(|e| Error::io("listen address", e))?;
        Ok(Server {
            listener,
            model,
            opts,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener
            .local_addr()
            .expect("bound listener has an address")
    }

    /// Accepts connections until `stop` is set.
    pub fn serve(self, stop: Arc<AtomicBool>) -> Result<()> {
        for stream in self.listener.incoming() {
            if stop.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = stream else { continue };
            let (model, opts) = (Arc::clone(&self.model), self.opts);
            std::thread::spawn(move || serve_stream(stream, model, opts));
        }
        Ok(())
    }

    /// Serves on a background thread.
    pub fn spawn(self) -> ServerHandle {
        let addr = self.local_addr();
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let thread = std::thread::spawn(move || {
            let _ = self.serve(flag);
        });
        ServerHandle { addr, stop, thread }
    }
}

fn serve_stream(stream: TcpStream, model: Arc<Model>, opts: ServerOptions) {
    let _ = stream.set_nodelay(true);
    let (Ok(read_half), Ok(write_half), Ok(closer)) =
        (stream.try_clone(), stream.try_clone(), stream.try_clone())
    else {
        return;
    };
    run_connection(
        BufReader::new(read_half),
        Box::new(std::io::BufWriter::new(write_half)),
        model,
        opts,
        move || {
            let _ = closer.shutdown(Shutdown::Both);
        },
    );
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: JoinHandle<()>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting connections. Open connections run to completion.
    pub fn shutdown(self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        let _ = self.thread.join();
    }
}
