//! Parameter-efficient domain adaptation of speaker-embedding networks with
//! trainable squeeze-and-excitation blocks and batch-norm layers.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapters;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
