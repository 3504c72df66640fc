//! Closed-form and Monte Carlo analysis of two-layer ReLU networks whose
//! inputs are multiplied by Gaussian masks c ~ N(1, kappa^2 I).

pub mod analytic;
pub mod bivariate;
pub mod cli;
pub mod error;
pub mod gaussmath;
pub mod io;
pub mod linalg;
pub mod mc;
pub mod model;
pub mod ntk;
pub mod seeding;
pub mod suite;
pub mod train;

pub use error::{Error, Result};
