//! Interval-sliced sequential recommendation with similarity-based
//! denoising and augmentation.
//!
//! The pipeline ingests timestamped user-item logs, slices time into equal
//! intervals, refines the per-interval graphs (community-based noise
//! down-weighting plus similarity augmentation), learns short-term
//! graph-convolution embeddings fused with recurrent, attentive, and
//! mean-pooled long-term embeddings through an adaptive gate, and scores
//! next-interval interactions with HR@N / NDCG@N.

pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod fusion;
pub mod louvain;
pub mod model;
pub mod autodiff;
pub mod pipeline;
pub mod refine;
pub mod synthetic;
pub mod trainer;
pub mod temporal;
pub mod tensor;

pub use error::{Error, Result};
