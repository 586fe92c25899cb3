#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Monotone probabilistic max-plus solver for fully nonlinear
//! Hamilton-Jacobi-Bellman equations.

pub mod basis;
pub mod bench;
pub mod error;
pub mod factorization;
pub mod monotone_poly;
pub mod problem;
pub mod quadrature;
mod rng;
pub mod scheme;
pub mod simulation;
pub mod solver;

pub use error::{Error, Result};
