//! Penalization solver for linear-quadratic extended mean field games with
//! the terminal constraint X_T = 0.

pub mod cli;
pub mod coefficients;
pub mod config;
pub mod error;
pub mod field;
pub mod grid;
pub mod meanflow;
pub mod ode;
pub mod riccati;
pub mod trajectory;
pub mod verify;

pub use error::{Error, Result};
