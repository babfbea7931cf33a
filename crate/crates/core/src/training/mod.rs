//! Loss, optimizers, datasets and the training loop.

mod data;
mod gradsuite;
mod loss;
mod optim;
mod trainer;

pub use data::{Dataset, Sample};
pub use gradsuite::{gradient_suite, pipeline_case, toy_model_config, toy_world, toy_world_spec};
pub use loss::{gwh_infonce_level, reference_loss, reference_loss_unshifted, total_loss, TapeKernel};
pub use optim::{
    adam_step, clip_gradients, global_norm, riemannian_adam_step, AdamHyper, AdamState, DRIFT_WARN_TOL,
};
pub use trainer::{
    batch_loss, batch_loss_with_keys, check_pipeline_gradients, evaluate_model, model_indices, predict, BatchLoss, EpochRecord, MetricsLog,
    Trainer, EVAL_CHUNK,
};
