//! User-taught speech-to-intent decoders on character posteriorgrams.
//!
//! The crate is organised around the pipeline an utterance goes through:
//!
//! * [`posteriorgram`] synthesises (or loads) per-frame character
//!   log-probabilities, standing in for a frozen acoustic encoder.
//! * [`features`] turns posteriorgrams into histogram-of-acoustic-co-occurrence
//!   (HAC) embeddings and intents into many-hot semantic vectors.
//! * [`nmf`] learns a joint semantic/acoustic dictionary with KL-divergence
//!   multiplicative updates and decodes unseen utterances.
//! * [`capsule`] is the attention/distributor capsule decoder trained with a
//!   margin loss.
//! * [`harness`] holds the synthetic command grammars and the learning-curve
//!   and HAC-delay ablation protocols.

pub mod capsule;
pub mod error;
pub mod features;
pub mod harness;
pub mod nmf;
pub mod posteriorgram;
pub mod seed;
mod textio;

pub use error::{Error, ErrorKind, Result};
pub use textio::write_atomic;
