//! Model inversion for small Vision Transformers: dense, scheduled-sparse
//! and progressive-detachment synthesis, an exact cost model, and a
//! data-free distillation harness.

pub mod config;
pub mod cost;
pub mod error;
pub mod format;
pub mod harness;
pub mod inversion;
pub mod optim;
pub mod report;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
