//! Unsupervised domain-adaptive semantic segmentation with multi-grained
//! contrastive self-training.

pub mod augment;
pub mod bank;
pub mod data;
pub mod diffcore;
pub mod engine;
pub mod error;
pub mod geom;
pub mod gradsuite;
pub mod losses;
pub mod model;
pub mod rng;

pub use diffcore::{Graph, Tensor, Var};
pub use error::{Error, Result};
