//! Toy-scale vision-transformer training toolkit built around
//! attention-guided mixup label assignment.
//!
//! Inputs are mixed with rectangular cut-and-paste masks; label weights are
//! computed from the model's own class-attention map instead of from box
//! area alone. Everything runs on the CPU in a few seconds so that each
//! formula stays executable and testable.

pub mod error;
pub mod tensor;
pub mod augment;
pub mod vit;

pub use error::{Error, Result};
