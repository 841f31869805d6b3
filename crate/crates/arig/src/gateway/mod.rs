//! Network session service: wire protocol, server, scripted client and
//! transcript tooling.

pub mod client;
pub mod protocol;
pub mod server;
pub mod transcript;

pub use client::{drive_lines, drive_stream, stream_lines, DriveOptions, DriveReport, Pace};
pub use protocol::{Encoding, ErrorCode, Features, Message, PROTOCOL_VERSION};
pub use server::{Server, ServerHandle, ServerOptions};
