//! Losses, optimiser, learning-rate schedule and the adversarial loop.

mod gradcheck;
mod infer;
mod losses;
mod optim;
mod schedule;
mod trainer;

pub use gradcheck::{gradcheck, GradcheckReport};
pub use infer::reconstruct_volume;
pub use losses::{
    discriminator_loss_var, gan_losses, gan_losses_with, generator_adv_var, l1_loss, l1_loss_var,
    total_generator_loss, total_generator_loss_var, GanLoss,
};
pub use optim::{adam_step, AdamConfig, OptimizerState};
pub use schedule::{lr_at_epoch, plateau_for, TrainConfig};
pub use trainer::{
    format_metric_log, train_from, train_observed, train_run, validation_psnr, EpochMetrics, TrainData, TrainOutcome,
};
