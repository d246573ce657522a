//! Training loop, optimiser, checkpoints, ablations and exports.

mod ablate;
mod config;
mod export;
mod optimizer;
mod trainer;

pub use ablate::{ablate, compare, run_summary, Ablation, AblationReport, RunSummary};
pub use config::{AblationFlags, LrSchedule, TrainConfig};
pub use export::{export_attention, export_segmentation};
pub use optimizer::{lr_at, AdamW, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use trainer::{evaluate, image_gradients, train, EvalLog, StepLog, TrainOutcome, TrainState};
