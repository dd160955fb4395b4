//! Link-level simulation of downlink OTFS-SCMA.
//!
//! The crate covers the OTFS grid transforms, the delay-Doppler channel,
//! SCMA codebooks with an MPA decoder, the cross-domain iterative detector,
//! multi-user belief consensus, state evolution and a Monte Carlo harness.

pub mod belief;
pub mod channel;
pub mod cooperation;
pub mod detector;
pub mod error;
pub mod otfs;
pub mod scma;
pub mod sim;
pub mod state_evolution;

pub use error::{Error, Result};
