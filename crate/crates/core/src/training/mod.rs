//! Losses, optimizer, training loop, λ sweep and gradient self-check.

mod loss;
mod optim;
mod suite;
mod sweep;
mod train;

pub use loss::{cross_entropy, cross_entropy_indices, dice_loss, joint_loss, LossReport, LossWeights, DICE_EPS};
pub use optim::AdaMax;
pub use suite::{gradient_suite, GradCheckEntry, PIPELINE_TOL, PRIMITIVE_TOL, SUITE_SEEDS};
pub use sweep::{lambda_sweep, routing_for, train_and_evaluate, SweepOptions, SweepRun, ABLATION_LAMBDAS};
pub use train::{
    evaluate_loss, make_batch, model_grad_check, train, train_with, EpochReport, ModelGradCheck, TrainConfig,
};
