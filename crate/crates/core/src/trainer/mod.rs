//! Supervised and distillation training loops and the label-efficiency grid.

mod config;
mod data;
mod report;
mod train;

pub use config::{apply_override, labeled_scenes, DataConfig, ExperimentConfig, OptimConfig};
pub use data::{generate_dataset, train_seed, val_seed, Dataset, Sample, View};
pub use report::{efficiency_table, runs_csv, series_csv, table_csv, EfficiencyRow};
pub use train::{
    ema_apply, evaluate_student, evaluate_teacher, run_label_efficiency, train_student, train_student_logged,
    train_teacher, ModelKind, RunReport, StepLog, Views, FLIPS,
};
