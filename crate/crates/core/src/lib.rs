//! Stochastic linear-quadratic control with random coefficients: problem
//! data, backward stochastic Riccati solvers, closed-loop feedback synthesis
//! and Monte Carlo verification.

// `!(x > 0.0)` guards also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod evaluate;
pub mod feedback;
pub mod grid;
pub mod pinv;
pub mod problem;
pub mod riccati;

pub use error::{Result, SlqError};
pub use feedback::{FeedbackLaw, RegularityReport};
pub use grid::{make_grid, sample_brownian, BrownianBatch, PathArray, TimeGrid};
pub use problem::{CoefficientModel, ModelKind};
pub use riccati::{RiccatiSolution, SolverTag};
