//! Tracking benchmarks, the dataset container and noise-scale ablations.

pub mod config;
pub mod container;
mod eval;
pub mod pipeline;
mod tasks;

pub use config::{AblationConfig, DataConfig, EvalConfig, ModelEntry, RunConfig};
pub use eval::{evaluate_methods, repeat_seed, BenchRow, BenchTable, Controller, Method};
pub use pipeline::{
    generate, model_ablation, run_benchmark, run_control, run_noise_ablation, train_policies, train_surrogates,
    AblationOutcome, AblationPart, BenchOutcome, ModelAblation, RunDir,
};
pub use tasks::{
    l2_weight, make_tasks, score, score_fields, MetricsReport, TaskConfig, TaskMetrics, TaskSampler, TrackingTask,
};
