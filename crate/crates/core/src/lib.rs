// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod arrays;
pub mod cli;
pub mod error;
pub mod evaluate;
pub mod factworld;
pub mod iterate;
pub mod optimize;
pub mod recipe;
pub mod spread;
pub mod toylm;
mod optser;
mod vecser;

pub use error::{Error, Result};
