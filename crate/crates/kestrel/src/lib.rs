//! Part-aware point grounded description at desk scale.

pub mod domain;
pub mod error;
pub mod gradcheck;
pub mod grammar;
pub mod nn;
pub mod tape;
pub mod templates;
pub mod tensor;

pub use error::{Error, Result};
