//! Live streaming bridge for interactive sessions.
//!
//! A TCP service speaking newline-delimited JSON (see [`protocol`]). One
//! controller thread owns the simulator and applies client commands only
//! between control ticks, so a goal click is either fully in effect for a
//! tick or not at all. Every connected client receives the same broadcast
//! stream.

pub mod protocol;
mod server;

pub use protocol::{parse_client_line, ClientMessage, Envelope, Parsed, ServerMessage, StateSnapshot};
pub use server::{serve, BridgeHandle, ServeOptions};
