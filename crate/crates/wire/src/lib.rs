//! Length-prefixed binary protocol that lets agents, the master and the
//! CLI share one engine from separate processes. See `PROTOCOL.md` at the
//! repository root for the byte layout.

pub mod client;
pub mod frame;
#[cfg(feature = "testkit")]
pub mod harness;
pub mod server;

pub use client::RemoteBackend;
pub use server::{Server, ServerHandle};

pub const DEFAULT_PORT: u16 = 7114;
pub const ADDR_ENV: &str = "FORGE_ADDR";

/// `FORGE_ADDR` if set, else the loopback default.
pub fn default_addr() -> String {
    std::env::var(ADDR_ENV)
        .ok()
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| format!("127.0.0.1:{DEFAULT_PORT}"))
}
