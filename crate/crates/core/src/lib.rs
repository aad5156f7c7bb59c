//! Generative dialogue state tracking with natural-language slot descriptions.
//!
//! A slot is tracked by asking a sequence-to-sequence model for its value given
//! the dialogue history and a short description of the slot. Unseen domains can
//! then be tracked by writing descriptions for their slots.

pub mod corpus;
pub mod error;
pub mod evaluator;
pub mod model;
pub mod prompting;
pub mod schema;
pub mod trainer;

pub use error::{Error, ErrorCategory, Result};
