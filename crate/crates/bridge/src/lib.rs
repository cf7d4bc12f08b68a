//! WebSocket bridge between a single operator client and the assistance
//! loop. The session logic lives in [`session`] and runs on one owner
//! thread; [`server`] only moves frames.

pub mod protocol;
pub mod server;
pub mod session;

pub use protocol::{ClientMessage, Envelope, Phase, ServerMessage, PROTOCOL_VERSION, SCHEMA};
pub use server::{serve, BridgeError, Server, ServerConfig};
pub use session::BridgeSession;
