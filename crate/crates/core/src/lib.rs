// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod gfm;
pub mod inference;
pub mod kg;
pub mod numerics;
pub mod pretrain;
pub mod selector;

pub use error::{Error, Result};
