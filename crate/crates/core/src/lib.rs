// `!(x > 0.0)` is used on purpose to reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod archive;
pub mod audio;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod frontend;
pub mod joint;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod patching;
pub mod seeding;
pub mod teacher;
pub mod training;

pub use error::{M2dsError, Result};
