//! Optimal-reference CBF controller for vehicles merging from two roads,
//! with time-driven and event-triggered update schemes.

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cbf;
pub mod cli;
pub mod coordinator;
pub mod error;
pub mod event;
pub mod io;
pub mod metrics;
pub mod model;
pub mod planner;
pub mod qp;
pub mod sim;

pub use error::{Error, Result};
