//! Hybrid sentence embeddings for clinical text.
//!
//! A small transformer encoder is trained from scratch twice, once with a
//! dropout-view contrastive objective ([`simcse`]) and once as a denoising
//! auto-encoder ([`tsdae`]). The two resulting embeddings are concatenated
//! ([`hybrid`]) and scored with the evaluation harness in [`eval`] and the
//! downstream prediction protocol in [`predict`].

pub mod binio;
pub mod cli;
pub mod error;
pub mod corpus;
pub mod encoder;
pub mod eval;
pub mod hybrid;
pub mod predict;
pub mod simcse;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod tsdae;

pub use error::{Error, Result};
