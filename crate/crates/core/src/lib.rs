//! Gradient-based approximate machine unlearning for small MLP classifiers.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod trainer;
pub mod unlearn;
pub mod vecops;
pub mod verify;

pub use error::{Error, Result};
