//! Loss stack, AdamW with warmup and cosine decay, the windowed training
//! loop with checkpoints and metrics, and prior-encoder pretraining.

mod batch;
mod losses;
mod optim;
mod prior;
mod runner;

pub use batch::{frame_loss, frame_targets, person_targets, window_loss, window_targets, FrameTargets, LossTerms, WindowResult};
pub use losses::{
    loss_human, loss_pointmap, loss_pose, pointmap_loss_value, HumanTerms, LossWeights, PersonTarget, PoseLossFn,
    ProjectFn, QuatMatFn, REPROJ_MIN_Z,
};
pub use optim::{clip_grad_norm, lr_at, AdamW};
pub use prior::{pretrain_prior, prior_val_l1, PriorConfig};
pub use runner::{
    sample_window, train_loop, val_window, validation_loss, TrainConfig, TrainData, TrainOutcome, TrainSession,
    CHECKPOINT_DIR, METRICS_FILE, OPTIM_FILE,
};
