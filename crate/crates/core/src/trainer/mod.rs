//! Optimization loop, evaluation and the codebook-size ablation.

mod config;
mod optim;
mod run;

pub use config::{DataConfig, DataKind, RunConfig, TrainConfig};
pub use optim::{adamw_step, poly_lr, AdamState, AdamWConfig};
pub use run::{
    ablate_codebook, ablation_csv, checkpoint_dir, evaluate, evaluate_model, final_checkpoint, load_split, losses_csv,
    summarize_ablation, train, AblationRow, AblationSummary, EvalOptions, EvaluateOptions, LossPoint, RunReport, Split,
};
