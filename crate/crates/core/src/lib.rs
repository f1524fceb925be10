//! Simulation and analysis toolkit for aligning the measurement bases of
//! entanglement-based QKD receivers using only observed correlations.

pub mod algebra;
pub mod cli;
pub mod control;
pub mod error;
pub mod model;
pub mod scenario;
pub mod sifting;
pub mod sim;

pub use error::{Error, Result};
