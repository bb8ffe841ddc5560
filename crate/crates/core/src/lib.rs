//! Coupled primal/dual unrolled graph neural networks that learn the dynamics
//! of dual ascent for parametric quadratic programs.

pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod gnn;
pub mod io;
pub mod oracle;
pub mod problem;
pub mod seed;
pub mod selftest;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
