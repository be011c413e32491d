//! Recurrent forecaster with a backward projector, reverse-martingale
//! regularization, and joint training by backpropagation through time.

mod model;
mod train;

pub use model::{
    CellKind, CellParams, DistHead, ForwardPass, HiddenTrajectory, PointHead, Projector, RmModel,
    SIGMA_MAX, SIGMA_MIN,
};
pub use train::{
    gradient_check, lambda_schedule, rm_loss, rm_loss_windowed, rm_q_hat, task_loss, train,
    EpochLog, LeadTargets, TrainConfig,
};
