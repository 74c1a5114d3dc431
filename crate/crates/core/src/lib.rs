//! Penalized HUM null control for stochastic complex Ginzburg-Landau
//! equations on a binomial scenario tree, with Carleman-weight diagnostics and
//! Picard loops for the semilinear problems.

pub mod carleman;
pub mod error;
pub mod fixedpoint;
pub mod grid;
pub mod hum;
pub mod nonlinear;
pub mod norms;
pub mod runner;
pub mod solvers;
pub mod tree;
pub mod weights;

pub use error::{LabError, Result};
