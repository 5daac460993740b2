//! Multi-domain contrastive pretraining of radio-signal encoders with an
//! RL-tuned augmentation policy, plus few-shot fine-tuning of an
//! attention-fusion classifier and frozen evaluation.

pub mod augment;
pub mod checkpoint;
pub mod clustering;
pub mod config;
pub mod conloss;
pub mod domains;
pub mod encoders;
pub mod error;
pub mod heads;
pub mod nn;
pub mod pipeline;
pub mod sac;
pub mod sigdata;

pub use error::{Error, Result};
