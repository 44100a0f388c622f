//! Stochastic optimal control losses, oracles and the machinery to compare them.

pub mod adjoint;
pub mod bench;
pub mod control;
pub mod error;
pub mod linalg;
pub mod losses;
pub mod parallel;
pub mod problem;
pub mod reparam;
pub mod simulate;
pub mod train;

pub use error::{Error, Result};
