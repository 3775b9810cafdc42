//! Real-time shared-control sessions around a trained PV-RNN: the 100 ms
//! tick loop, its wire protocol and transports, offline replay, and the
//! `vcbot` command line.

pub mod artifacts;
pub mod cli;
pub mod error;
pub mod pipeline;
pub mod runner;
pub mod server;
pub mod wire;

pub use artifacts::Artifacts;
pub use error::{Result, ServiceError};
pub use runner::{replay_records, run_session, Inbound, SessionOptions, SessionOutcome};
pub use server::{serve, ServeOptions, Transport};
