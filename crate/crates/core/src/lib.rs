//! Attention extraction from gameplay replays.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! * [`data`] — replay memories with gaze trails, a synthetic lane-crossing
//!   environment with a ground-truth relevance oracle, and a documented
//!   archive format for external logs.
//! * [`nn`] — the shared network building blocks (anti-aliased encoder,
//!   dilated context head, action predictor, dueling Q-network) with
//!   hand-written forward/backward passes.
//! * [`ae`] — autoencoder pre-training for the shared encoder.
//! * [`ctr`] — joint training of the sparsity-controlled attention network
//!   and the action predictor via feature blending.
//! * [`tioa`] — temporally-integrated overt attention targets built from
//!   gaze trails, and the network trained to predict them.
//! * [`eval`] — masked action-prediction accuracy, activation-rate
//!   calibration, alignment scores, heatmaps and significance tests.
//! * [`rl`] — attention-masked dueling double DQN with proportional
//!   prioritized replay on the toy environment.

pub mod ae;
pub mod checkpoint;
pub mod ctr;
pub mod data;
pub mod error;
pub mod nn;
pub mod tioa;

pub use error::{Error, Result};
