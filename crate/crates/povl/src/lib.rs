//! Trajectory prediction with variable-length observations and
//! potential-field MPC motion planning for highway merging.
//!
//! The pipeline: vehicle tracks are converted to road-aligned Frenet
//! coordinates ([`geometry`]), per-step feature vectors are assembled into
//! masked observation windows ([`features`]), a transformer encoder-decoder
//! predicts bivariate Gaussian displacements for 2..15-step observations
//! ([`transformer`], [`predictor`]), and an SQP-based receding-horizon
//! planner steers a merging ego vehicle through a repulsive potential field
//! built from those predictions ([`dynamics`], [`potential`], [`mpc`]).
//! Closed-loop runs are scored for safety, comfort, and efficiency
//! ([`metrics`]).

pub mod cli;
pub mod config;
pub mod dynamics;
pub mod features;
pub mod geometry;
pub mod metrics;
pub mod mpc;
pub mod potential;
pub mod predictor;
pub mod scene;
pub mod sim;
pub mod synthetic;
pub mod training;
pub mod transformer;
