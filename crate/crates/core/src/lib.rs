#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cmdp;
pub mod controller;
pub mod error;
pub mod exec;
pub mod flow;
pub mod harness;
pub mod trainer;

pub use error::{Error, Result};
