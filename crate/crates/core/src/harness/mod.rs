//! Experiment driver: configuration, checkpoints, metrics, training,
//! evaluation, mask export and the ablation runner.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod tools;
pub mod train;

pub use checkpoint::{restore_model, Checkpoint};
pub use config::{EvalConfig, RunConfig, StageConfig};
pub use metrics::{read_metrics, MetricsRecord, MetricsWriter};
pub use train::{evaluate_samples, train_stage1, train_stage2, EvalReport, StageOutcome};
pub use tools::{
    eval_checkpoint, generate_answers, inspect_mask, load_model, mask_rows, read_mask_csv, run_ablation, write_ablation_csv, write_csv,
    AblationCell, AblationMatrix, AblationRow, AblationSummary, Generation, MaskRow,
};
