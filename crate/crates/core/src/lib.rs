//! Stochastic SI spread on a multitype random population where each
//! infected vertex makes a random number of contact attempts.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asymptotics;
pub mod chain;
pub mod cli;
pub mod error;
pub mod harness;
pub mod mgw;
pub mod model;
pub mod offspring;
pub mod stats;

pub use error::{Error, Result};
