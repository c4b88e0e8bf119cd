//! Differentiable sequence networks with explicit forward/backward passes.

pub mod layers;
pub mod lstm_lm;
pub mod potential;
pub mod tensor;

pub use lstm_lm::{
    mean_nll, train_lstm_lm, LstmEpoch, LstmLmConfig, LstmLmParams, LstmTrainConfig,
};
pub use potential::{PotentialCache, PotentialConfig, PotentialParams};
pub use tensor::{ParamSet, Tensor};
