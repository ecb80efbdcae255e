//! Data ingestion, optimisation, the training loop, evaluation and
//! checkpoints.

mod checkpoint;
mod config;
mod data;
mod eval;
mod gradcheck;
mod model;
mod optim;
mod train;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointMeta, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{Ablation, TrainConfig};
pub use data::{
    crop_border, load_image, preprocess, synthetic_image, write_synthetic_dataset, Manifest, ManifestRecord,
    BORDER_THRESHOLD,
};
pub use eval::{evaluate, EvalReport, RetrievalReport, Task};
pub use gradcheck::{
    check_training_loss, gradcheck_batch, gradcheck_suite, GradCheckEntry, GRADCHECK_STEP, GRADCHECK_TOLERANCE,
};
pub use model::{LossParts, Model, Pooler};
pub use optim::{adamw_step, AdamWHyper, AdamWState};
pub use train::{best_checkpoint_path, load_vocabulary, train, train_model, EpochLog, TrainData, TrainLog};
