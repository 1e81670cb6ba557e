//! Proposal-free nuclear instance segmentation.
//!
//! A dual-head spatially aware network predicts a nucleus mask and a centroid
//! detection map from RGB; a single-head network predicts a per-pixel
//! positional embedding from RGB, HSV, the predicted mask and coordinate
//! planes; post-processing clusters the embeddings clump by clump into
//! labeled instances.

pub mod autograd;
pub mod blocks;
pub mod config;
pub mod data;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod kernels;
pub mod groundtruth;
pub mod layers;
pub mod losses;
pub mod maps;
pub mod metrics;
pub mod networks;
pub mod postproc;
pub mod tensor;
pub mod training;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::Tensor;
