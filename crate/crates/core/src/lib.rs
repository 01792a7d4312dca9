//! Behavior-guided privileged knowledge distillation for neural population
//! dynamics models.
//!
//! A teacher encoder is trained with masked spike reconstruction while also
//! seeing behavior; a student that sees spikes only is then trained against
//! both the reconstruction objective and one of four distillation losses.
//! The crate also carries the synthetic benchmark generators and the
//! evaluation and analysis suite used to compare the resulting models.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod losses;
pub mod models;
pub mod numerics;
pub mod training;

pub use error::{BlendError, Result};
pub use exec::Execution;
