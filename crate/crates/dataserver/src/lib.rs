//! In-memory keyed tensor store served over a small binary TCP protocol.
//!
//! It is the only channel between training roles: chips, gradient bundles,
//! global weights, scheduler rows and signalling counters all live here.

pub mod client;
pub mod protocol;
pub mod server;
pub mod store;

pub use client::{Client, ClientError};
pub use server::{serve, ServerConfig, ServerHandle};
pub use store::{Store, DEFAULT_MEM_CAP};
