//! Writer verification from word-fragment images.
//!
//! The crate is organized around a five-stage pipeline:
//!
//! 1. ingest a corpus and split it by writer,
//! 2. pretrain an encoder without labels (generative or contrastive),
//! 3. extract fixed-length embeddings (learned or handcrafted),
//! 4. train a pairwise verifier head on balanced same/different pairs,
//! 5. evaluate cosine separation and verification accuracy on unseen writers.

pub mod augment;
pub mod checkpoint;
pub mod corpus;
pub mod cssl;
pub mod error;
pub mod evalkit;
pub mod handcrafted;
pub mod imageops;
pub mod nn;
pub mod seeds;

pub use corpus::{Corpus, HandwritingSample, PairSet, SampleRef, WriterSplit};
pub use error::{Error, Result};
pub use evalkit::{SeparationReport, VerificationMetrics};
pub use handcrafted::Embedding;
pub use imageops::{ProcessedImage, Provenance, RawImage};
