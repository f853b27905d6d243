//! Router-tuned dynamic depth for small decoder transformers: per-layer skip
//! routers trained on a frozen backbone, with true bypass at inference and
//! cost accounting against static-drop baselines.

pub mod commands;
pub mod config;
pub mod error;
pub mod eval;
pub mod model;
pub mod moe_skip;
pub mod router;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor};
