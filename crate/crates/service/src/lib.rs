//! Human-in-the-loop driving sessions over a websocket.
//!
//! The server ticks the simulator once per simulated second, applies the
//! driver's latest controls, and sends the state with the policy's gated
//! instruction. Adaptation and meta updates run off the tick path.

pub mod error;
pub mod protocol;
pub mod server;
pub mod session;

pub use error::{Result, ServiceError};
pub use protocol::Frame;
pub use server::{ServeOptions, Server, ServerHandle};
pub use session::{Phase, Session};
