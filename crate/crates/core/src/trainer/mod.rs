//! Pretraining, fine-tuning, grid search, experiments and checkpoints.

pub mod checkpoint;
pub mod experiment;
pub mod finetune;
pub mod pretrain;
pub mod search;

pub use checkpoint::{load_checkpoint, load_with_vocab, read_checkpoint, save_checkpoint, vocab_path_for, CheckpointMeta};
pub use experiment::{
    load_task_data, run_experiment, run_experiment_with, run_transfer, ExperimentSpec, Plan, RunReport, SplitRun, TaskData, TaskFiles,
    TransferData, TransferPlan,
};
pub use finetune::{encode_segments, evaluate, predict_all, score, train_sflm, FineTuneData, Metric, StepLog, TrainOutcome};
pub use pretrain::{pretrain_mlm, PretrainConfig, PretrainReport};
pub use search::{apply_point, grid_search, Grid, GridOutcome, GridPointResult};
