//! Transferable phoneme embeddings for few-shot cross-lingual adaptation.
//!
//! Phoneme queries are pooled from aligned acoustic frames, mapped through
//! a shared multi-head attention codebook into phoneme embeddings, and the
//! codebook is meta-trained so those embeddings work for unseen languages.

pub mod adaptation;
pub mod cli;
pub mod codebook;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod mapping;
pub mod optim;
pub mod query;
pub mod synth;
pub(crate) mod tensor_io;
pub mod trainer;

pub use error::{Result, XpqError};
