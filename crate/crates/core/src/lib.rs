//! Single-image morphing-attack detection.
//!
//! A small feed-forward embedder is trained with an online semi-hard triplet
//! loss so that bona fide samples cluster together and morphs land far away.
//! Probes are scored by their mean distance to a fixed template of bona fide
//! reference embeddings, and the resulting scores are evaluated with the
//! ISO/IEC 30107-3 error rates (APCER, BPCER, EER, BPCER10, BPCER20).
//!
//! Face images are replaced by synthetic feature vectors: identities are
//! Gaussian clusters, morphs are convex combinations of two identities with
//! tool-specific perturbations, and "digital" datasets are affine domain
//! shifts of "synthetic" ones.

// `!(a < b)` is used on purpose so that NaN takes the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod error;
pub mod label;
pub mod metrics;
pub mod mining;
pub mod network;
pub mod protocol;
pub mod rng;
pub mod scoring;
pub mod synth;

pub use error::{Error, Result};
pub use label::Label;
