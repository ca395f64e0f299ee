//! Real-time teleoperation over websockets: an operator steers the degraded
//! arm with pointer targets and keys and records episodes for training.
//!
//! See `PROTOCOL.md` for the message catalogue.

pub mod protocol;
pub mod server;
pub mod session;

pub use protocol::{Command, Role, ServerMessage, StateFrame};
pub use server::{serve, ServerConfig};
pub use session::Session;
