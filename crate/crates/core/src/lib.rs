//! Log-Euclidean compounding of directionally acquired scalar volumes into a
//! positive-definite tensor volume.

pub mod error;
pub mod eval;
pub mod model;
pub mod solver;
pub mod symcalc;
pub mod synth;
pub mod tvreg;
pub mod volume;

pub use error::{Error, Result};
