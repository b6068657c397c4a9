//! Reference engine for a hybrid Transformer / Mamba2 / mixture-of-experts
//! language model.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod cpsim;
pub mod error;
pub mod flops;
pub mod io;
pub mod model;
pub mod moe;
pub mod numerics;
pub mod oracle;
pub mod rlmath;
pub mod ssd;
pub mod verify;

pub use error::{Error, Result};
