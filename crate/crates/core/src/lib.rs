//! Robust CNN watermarking trained against worst-case image distortions.
//!
//! The encoder embeds a binary message into a cover image, a family of
//! differentiable distortions (crop, cropout, dropout, Gaussian blur and a
//! DCT-domain JPEG approximation) attacks the result, and the decoder
//! recovers the message. Training alternates an exhaustive search for the
//! most damaging severity of each distortion with a gradient step of the
//! networks against that worst case.

pub mod attacks;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod ingest;
pub mod models;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod types;

pub use config::{
    load_config, AttackKind, AttackSpec, LossWeights, SeverityGrid, TrainConfig, TrainMode,
};
pub use error::{Error, Result};
pub use rng::{make_rng, RngState};
pub use tensor::{Real, Tensor};
pub use types::{DecodedBatch, ImageBatch, ImageRole, MessageBatch};
