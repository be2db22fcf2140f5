//! Multi-task bottlenecked masked-autoencoder pre-training for dense
//! passage retrieval, at desk scale.

pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod finetune;
pub mod masking;
pub mod model;
pub mod pretrain;
pub mod retrieval;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod textcorpus;

pub use error::{Error, Result};
