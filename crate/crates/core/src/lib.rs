//! Context-aware prompt perturbation under local differential privacy.
//!
//! Each sensitive token of a prompt is replaced by a token drawn from a
//! bucketized exponential mechanism whose utility mixes a language model's
//! contextual logits with embedding distance. Attacks and utility metrics for
//! evaluating the perturbed output live alongside the mechanism.

pub mod attacks;
pub mod error;
pub mod fsutil;
pub mod mechanism;
pub mod metrics;
pub mod par;
pub mod providers;
pub mod rng;
pub mod sampler;
pub mod utility;
pub mod vocab;

pub use error::{CapeError, Result};
pub use par::Execution;
