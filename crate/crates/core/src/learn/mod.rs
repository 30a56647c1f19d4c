//! Losses, hand-written reverse-mode gradients, Adam and the training loop.

mod adam;
mod grad;
mod loss;
mod pass;
mod schedule;
mod train;

pub use adam::{adam_step, AdamParams, AdamState};
pub use grad::GradientStore;
pub use loss::{
    accumulate_l1_gradient, add_l1_subgradient, batch_psnr, l1_density_loss, render_loss,
    total_loss, LossReport,
};
pub use pass::{backprop_ray, BackpropScratch};
pub use schedule::{decayed_lr, resolution_stages, round_to_odd, UpsampleSchedule};
pub use train::{train, MetricsRow, StepReport, TrainConfig, Trainer};
