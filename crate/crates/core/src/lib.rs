//! Transformer training, frozen-pretrained fine-tuning, chaotic image
//! encryption, evaluation metrics and heavy-tail simulation.

pub mod chaoscrypt;
pub mod checkpoint;
pub mod corpus;
pub mod datapipe;
pub mod error;
pub mod fpt;
pub mod metrics;
pub mod plot;
pub mod pretrain;
pub mod tailsim;
pub mod tensor;
pub mod transformer;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
