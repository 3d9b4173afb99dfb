//! Input-gated low-rank adapters (DISeL) next to plain LoRA, the closed-form
//! fixed-correction and Bayes-optimal baselines of the two-population linear
//! model, and the training and gate-diagnostic pipeline that reproduces the
//! toy experiment and a small retention experiment on a CPU.

pub mod adapters;
pub mod cli;
pub mod datagen;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod numkit;
pub mod optim;
pub mod oracle;
pub mod trainer;

pub use error::{Error, Result};
