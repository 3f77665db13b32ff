//! Loss, optimizer, schedule, checkpoints and the training loop.

pub mod adam;
pub mod checkpoint;
pub mod loss;
pub mod schedule;
pub mod trainer;

pub use adam::Adam;
pub use checkpoint::Checkpoint;
pub use loss::{loss_graph, ssim, ssim_graph, training_loss};
pub use schedule::lr_at;
pub use trainer::{
    draw_batch, make_sample, sample_gradients, train_loop, train_step, validate, TrainOptions,
    BEST_CHECKPOINT, LATEST_CHECKPOINT, METRICS_LOG,
    TrainOutcome, TrainSample, ValidationReport,
};
