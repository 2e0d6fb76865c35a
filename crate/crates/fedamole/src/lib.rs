//! Desk-scale simulator of personalized federated fine-tuning with
//! data-driven heterogeneous mixtures of LoRA experts.

pub mod assign;
pub mod autodiff;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod fed;
pub mod flow;
pub mod metrics;
pub mod mole;
pub mod optim;
pub mod privacy;
pub mod tensor;

pub use error::{Error, Result};
