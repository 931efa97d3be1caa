//! Training, evaluation and reporting harness.

mod config;
mod loss;
mod optim;
mod report;
mod run;

pub use config::RunConfig;
pub use loss::{bce_with_logits, segmentation_loss, sigmoid, soft_dice_loss, softplus, LossWeights, DICE_SMOOTH};
pub use optim::{Adam, AdamConfig};
pub use report::{ablation_table, collect_runs, results_table, write_reports};
pub use run::{
    batch_tensors, evaluate, evaluate_checkpoint, load_records, train, EpochRecord, GroundTruthPredictor,
    ModelPredictor, Predictor, RunRecord, StepStats, Trainer,
};
