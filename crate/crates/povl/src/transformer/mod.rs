//! Minimal tensor math, reverse-mode autodiff, and the transformer
//! encoder-decoder that predicts bivariate Gaussian displacements from
//! variable-length observation windows.

mod model;
mod tape;

pub use model::{
    adam_step, nll_loss, AdamState, Checkpoint, GaussianTrajectory, ModelConfig, ModelError,
    ParameterStore, PovlModel, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, CHECKPOINT_VERSION,
};
pub use tape::{
    gaussian_nll_step, gaussian_step_from_raw, GaussianStep, Mask, Mat, NodeId, Tape, TapeError,
    RHO_RAW_CLAMP, SIGMA_RAW_CLAMP,
};
