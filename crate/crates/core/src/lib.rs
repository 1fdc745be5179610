//! Weakly-supervised high-resolution lesion localization: a global
//! multi-scale saliency network proposes regions, a stride-reduced local
//! network segments selected patches, and a fusion head combines both —
//! trained in stages from image-level labels only, with deterministic
//! CPU-only numerics.

pub mod checkpoint;
pub mod conv;
pub mod dataset;
pub mod error;
pub mod fusion;
pub mod global;
pub mod gradcheck;
pub mod layers;
pub mod linalg;
pub mod local;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod params;
pub mod pgm;
pub mod patches;
pub mod pipeline;
pub mod rng;
pub mod saliency;
pub mod search;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{GlamError, Result};
pub use tensor::Tensor;
