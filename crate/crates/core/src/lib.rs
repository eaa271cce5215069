//! Mean-field analysis of wireless sensor network protocols.
//!
//! A per-node transition system ([`model::Component`]) is compiled into a
//! normalized population CTMC ([`pctmc::Pctmc`]) whose send transitions are
//! thinned by an interference-aware capture probability
//! ([`capture::CaptureCurve`]). The resulting mean-field ODEs are integrated,
//! their fixpoints located and their basins of attraction mapped
//! ([`odes`]); exact stochastic simulation ([`ssa`]) checks how quickly the
//! finite-N chain approaches the deterministic limit.

pub mod capture;
pub mod error;
pub mod model;
pub mod odes;
pub mod pctmc;
pub mod quad;
pub mod ssa;

pub use capture::{CaptureCurve, CaptureModel, ChannelModel, QTable, Spatial};
pub use error::{Error, Result};
pub use pctmc::{Pctmc, QArgument};
