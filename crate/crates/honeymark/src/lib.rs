//! Dataset ownership verification for image classifiers.
//!
//! A data owner selects hard samples from a private image dataset,
//! perturbs them under a tight L-infinity budget so that models trained
//! on them become distinguishable from models that never saw them, and
//! later audits a suspicious black-box classifier by comparing its loss
//! on those samples against an owner-side reference model.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`datasets`]: ingestion, synthetic generation, and the
//!   public/private/fold split machinery
//! - [`diffnet`]: a small differentiable-classifier core (forward,
//!   exact gradients, SGD training, checkpoints)
//! - [`hardness`]: out-of-training difficulty scoring and top-N selection
//! - [`honeygen`]: the alternating retrain / projected-sign-gradient
//!   optimization that produces the honey images
//! - [`verifier`]: black-box loss-gap queries, threshold calibration,
//!   and per-sample verdicts
//! - [`metrics`]: TPR/TNR/AUROC plus harmlessness and stealthiness
//! - [`baselines`]: a loss-threshold membership-inference verifier and a
//!   trigger-patch watermark for comparison
//! - [`pipeline`]: experiment orchestration behind the `honeymark` CLI

pub mod baselines;
pub mod datasets;
pub mod diffnet;
pub mod error;
pub mod hardness;
pub mod honeygen;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod verifier;

pub use error::{Error, Result};
