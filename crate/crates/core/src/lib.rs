//! Model predictive path-following control for a three-joint arm.

// Validation rejects NaN by writing checks as `!(x > 0.0)`.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acceptance;
pub mod augmented;
pub mod controller;
pub mod error;
pub mod integrator;
pub mod log;
pub mod ocp;
pub mod path;
pub mod plant;
pub mod qp;
pub mod robot;
pub mod scenario;

pub use error::{Error, Result};
