//! Augmentation policy search by density matching.
//!
//! A small probe classifier is trained on one half of each stratified fold.
//! Candidate augmentation policies are then scored by the probe's loss on the
//! *augmented* other half, without any further training, and a
//! tree-structured Parzen estimator proposes the next candidates. The best
//! policies of every fold and round are merged into one [`policy::PolicySet`],
//! which is finally used to retrain the classifier from scratch.
//!
//! Module map:
//!
//! - [`imageops`]: the 16 deterministic pixel operations and their magnitude table.
//! - [`policy`]: stochastic operations, sub-policies, policies and the augmented dataset.
//! - [`data`]: datasets, IDX / raw-dir IO, the synthetic generator, stratified folds.
//! - [`model`]: the probe CNN (training, loss, accuracy, checkpoints).
//! - [`tpe`]: the tree-structured Parzen estimator.
//! - [`search`]: the end-to-end search loop and retraining.
//! - [`cli`]: the `faa` command surface, manifests and experiment harnesses.

pub mod cli;
pub mod data;
pub mod error;
pub mod imageops;
pub mod model;
pub mod policy;
pub mod rng;
pub mod search;
pub mod tpe;

pub use error::{Error, Result};
