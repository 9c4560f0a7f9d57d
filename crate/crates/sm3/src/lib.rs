//! Self-supervised multi-modality, multi-label pretraining (SM3) at desk
//! scale: paired-modality contrastive pretraining, clustering-based
//! pseudo-multi-label training with a label-relation-aware attention module,
//! and the matching evaluation protocols (pair matching, linear probing,
//! fine-tuning) on synthetic paired data.

pub mod artifact;
pub mod augment;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod models;
pub mod params;
pub mod pseudolabel;
pub mod rng;
pub mod synthdata;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
