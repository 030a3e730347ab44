//! Distributed storage auditing driven by Sobol challenge sequences.
//!
//! The crate is organised bottom-up:
//!
//! * [`sobol`] generates the shared block-index sequence from a Sobol key.
//! * [`gf`], [`setrecon`] and [`strrecon`] implement the reconciliation
//!   machinery used to hand each auditor its task key cheaply.
//! * [`tdk`] builds and applies task distribution keys.
//! * [`cloudsim`] is the simulated block store that answers challenges.
//! * [`audit`] runs the coordinator and auditor agents for all four protocols.
//! * [`analysis`] turns multi-trial outcomes into summary tables and fits.

pub mod analysis;
pub mod arith;
pub mod audit;
pub mod cloudsim;
pub mod error;
pub mod gf;
pub mod setrecon;
pub mod sobol;
pub mod strrecon;
pub mod tdk;

pub use error::{Error, Result};
