//! Cost-aware multimodal prototype classification.
//!
//! Two prototype models are combined so that an inexpensive modality (image
//! embeddings) is used alone whenever it is sufficient, and an expensive one
//! (genetic embeddings) is measured only when it could change the answer:
//!
//! - [`cal`]: a ProtoPNet ensemble with class-wise logit mixing, a predictor of
//!   the genetic logits from image similarities, and split-conformal bounds
//!   that decide per sample whether the genetic measurement is needed.
//! - [`tree`]: a ProtoTree whose internal nodes are routed to one modality,
//!   so paths made only of image nodes never touch genetic data.
//!
//! Backbones are out of scope; everything operates on latent embedding maps
//! loaded from disk or produced by [`data::synth`].

pub mod cal;
pub mod cli;
pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod math;
pub mod optim;
pub mod proto;
pub mod protopnet;
pub mod tree;

pub use error::{Error, Result};
