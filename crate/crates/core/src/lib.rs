//! Multi-network contrastive learning on global and local features.
//!
//! Three coupled network branches pretrain one encoder without labels:
//! a back-propagation branch (backbone + projector + predictor) trained by
//! SGD, a momentum branch holding an exponential moving average of it, and
//! a stop-gradient branch whose weights are value-tied to the online ones.
//! The momentum branch supplies nearest-neighbor positives from a FIFO
//! support queue; the stop-gradient branch supplies local features by
//! encoding a 2x2 patch grid and averaging every k-subset of the four patch
//! encodings. A symmetrized cross-entropy over cosine logits couples the
//! branches; a frozen-encoder linear probe measures representation quality.

pub mod augment;
pub mod check;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod nn;
pub mod optim;
pub mod patching;
pub mod queue;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Row embeddings, batch x dim.
pub type EmbeddingBatch<F> = ndarray::Array2<F>;
