//! Contrastive pre-training of mature-RNA encoders on homology-pooled
//! transcript sets.

pub mod annotation;
pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod homology;
pub mod loss;
pub mod model;
pub mod synthetic;
pub mod train;
pub mod tracks;

pub use error::{Error, Result};
