//! Query-conditioned video highlight detection over cached encoder
//! activations.
//!
//! Frames and queries pass through small trainable transformer tops
//! ([`encoder`]), are compared by cosine similarity ([`saliency`]), trained
//! with a mean-squared saliency loss ([`training`]), smoothed with windowed
//! saliency pooling, and scored with the highlight-detection mAP and HIT@1
//! protocol ([`evalhd`]).

pub mod container;
pub mod encoder;
pub mod tensor;
pub mod data;
pub mod saliency;
pub mod training;
pub mod evalhd;
pub mod bench;
pub mod cli;
