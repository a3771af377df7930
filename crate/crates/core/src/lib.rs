//! 1D numerical laboratory for a two-species diffusion–aggregation system
//! with small cross diffusion.

pub mod baselines;
pub mod error;
pub mod flow;
pub mod grid;
pub mod jko;
pub mod lyapunov;
pub mod model;
pub mod steady;

pub use error::{Error, Result};
