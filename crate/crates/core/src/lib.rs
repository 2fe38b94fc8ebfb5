//! Dual-stream cloth-changing person re-identification at desk scale:
//! mask-guided augmentation, a shared-weight two-stream network with
//! multi-scale and semantic alignment constraints, counterfactual attention,
//! metric-learning losses, and retrieval evaluation under the standard
//! protocol filters.

pub mod augment;
pub mod autodiff;
pub mod backbone;
pub mod cam;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod losses;
pub mod mcb;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod sac;
pub mod trainer;

pub use error::{Error, Result};
