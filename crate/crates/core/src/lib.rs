//! Continual unsupervised domain adaptation for semantic segmentation.
//!
//! The library trains a small two-head segmentation network on a labeled
//! source domain and adapts it to a sequence of unlabeled target domains.
//! Forgetting on earlier targets is countered by expanding a frozen,
//! domain-specific memory module (`TargetMemory`) per target and by
//! distilling from a snapshot of the network taken before each adaptation
//! stage. Domain alignment uses a double-hinge adversarial objective
//! against per-level patch discriminators.
//!
//! Modules:
//! - [`nn`]: minimal reverse-mode autodiff substrate, SGD/Adam, gradcheck.
//! - [`models`]: segmentation network, target memories, patch discriminator.
//! - [`losses`]: hinge adversarial pair, cross-entropy, distillation, GAN baselines.
//! - [`data`]: procedural multi-domain shape benchmark + directory loader.
//! - [`metrics`]: confusion matrix, mIoU, forgetting/gain, results tables.
//! - [`trainer`]: the continual training loop and evaluation protocol.

pub mod data;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod trainer;
