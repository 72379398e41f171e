//! Word-level LSTM sequence-to-sequence dialogue engine.
//!
//! The crate covers the whole native pipeline: text normalization and
//! vocabularies ([`text`]), question/answer corpora and pretrained embedding
//! files ([`corpus`]), the encoder/decoder network with hand-derived
//! backpropagation ([`model`]), Adam training ([`trainer`]), the portable
//! model bundle shared with the browser client ([`bundle`]) and aggregation
//! of human rating records ([`evalkit`]).

pub mod bundle;
pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod model;
pub mod tensor;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
