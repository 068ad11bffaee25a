//! Desk-scale supervised contrastive learning for accented
//! character-sequence recognition.
//!
//! The pipeline: a deterministic synthetic accented corpus ([`corpus`]),
//! augmentation view builders ([`augment`]), a small attention
//! encoder-decoder ([`model`]) trained with a combined recognition +
//! contrastive objective ([`contrast`], [`trainer`]), beam-search decoding
//! and WER evaluation ([`decode`]), and embedding export with cluster
//! metrics ([`embed`]). Everything runs on the fp64 reverse-mode autodiff
//! engine in [`numerics`].

pub mod augment;
pub mod config;
pub mod contrast;
pub mod corpus;
pub mod decode;
pub mod embed;
pub mod error;
pub mod model;
pub mod numerics;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
