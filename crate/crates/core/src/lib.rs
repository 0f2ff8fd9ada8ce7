//! Adversarial removal of alignment-critical signal tokens with semantically
//! supervised compensation, plus the robustness evaluation protocol around it.

pub mod cmrs;
pub mod corpus;
pub mod error;
pub mod graph;
pub mod inference;
pub mod missingness;
pub mod model;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use graph::{NodeId, Tape};
pub use tensor::Tensor;
