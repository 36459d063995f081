#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod config;
pub mod decouple;
pub mod error;
pub mod game;
pub mod linalg;
pub mod riccati;
pub mod sim;
pub mod topology;

pub use error::{Error, Result};
