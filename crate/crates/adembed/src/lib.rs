//! Joint image-text embedding engine over precomputed feature vectors.
//!
//! The model learns a shared 200-D space for ad images and their
//! action-reason statements: region-attention image embeddings, mean-pooled
//! word embeddings for text, triplet training with in-batch hard-negative
//! mining, symbol- and caption-anchored constraint losses, and an optional
//! additive knowledge branch trained in a second phase with everything else
//! frozen. The evaluation side covers statement/slogan ranking, clustering
//! homogeneity, k-NN retrieval, and statement-distance analysis. All
//! randomness flows from a single run seed, so every artifact is replayable.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod losses;
pub mod manifest;
pub mod model;
pub mod rng;
pub mod symbols;
pub mod trainer;

pub use error::{Error, Result};
