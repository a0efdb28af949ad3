//! Reset-free periodic online learning in finite-horizon tabular MDPs.

pub mod algorithms;
pub mod environments;
pub mod error;
pub mod estimation;
pub mod harness;
pub mod mdp;
pub mod oracles;
pub mod random;
pub mod solver;

pub use error::{Error, Result};
