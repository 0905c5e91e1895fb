//! Contrastive photo-filter removal: a parametric filter bank for building
//! paired corpora, an AdaIN encoder–decoder generator with multi-scale
//! critics, isolated content/style patch-NCE objectives, WGAN-GP training,
//! and image-similarity metrics.

pub mod autograd;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod filter_bank;
pub mod gradcheck;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod patch_sampling;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
