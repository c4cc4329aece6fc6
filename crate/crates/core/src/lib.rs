//! Simulator and analysis toolkit for a three-node heralded-entanglement
//! quantum network: link model, noise channels, phase stabilization,
//! protocol engine, readout correction and an experiment harness.

pub mod cli;
pub mod error;
pub mod linkmodel;
pub mod noise;
pub mod phasestab;
pub mod protocol;
pub mod qstate;
pub mod tomo;

pub use error::{Error, Result};
