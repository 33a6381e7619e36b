//! Multi-domain self-supervised adaptation of embedding models.
//!
//! The crate covers a synthetic multi-domain speaker corpus, a small pooled
//! MLP encoder with hand-derived gradients, contrastive training with
//! in-domain negatives, a momentum-encoded memory bank and cross-domain
//! covariance alignment, and the verification metrics (EER, minDCF,
//! domain-by-domain matrix) used to compare training recipes.

pub mod batching;
pub mod benchmark;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod membank;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
