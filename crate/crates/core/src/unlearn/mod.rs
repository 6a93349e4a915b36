//! Unlearning objectives, the Adam optimizer and the forget/retain training loop.

mod adam;
mod config;
pub mod loss;
mod train;

pub use adam::{adam_step, OptimizerState, ADAM_EPS, BETA1, BETA2};
pub use config::{ForgetLoss, UnlearnConfig};
pub use loss::{eul_gradient_multiplier, eul_loss, eul_squared_loss, grad_ascent_loss};
pub mod gradcheck;

pub use train::{
    objective_gradients, objective_gradients_on, run_unlearn, train_base, EpochSummary, Objective,
    TrainLog, TrainRecord,
};
