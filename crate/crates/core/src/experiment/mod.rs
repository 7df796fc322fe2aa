//! JSON-configured experiments and the commands behind the CLI.
//!
//! A config names a model, synthetic data and its partition, a mask, the
//! round schedule, and optionally the GradIP early-stopping policy. Every
//! random choice is derived from `master_seed`, so a config file fully
//! determines the bytes of every output.

mod build;
mod commands;
mod config;

pub use build::{sub_seed, Setup};
pub use commands::{
    cmd_compare, cmd_gradip, cmd_mask, cmd_run, compare_rows, execute, exit_code, trajectory_file,
    write_compare_csv, CompareRow, RunReport, Summary, CLASSIFICATION_FILE, COMPARE_FILE, COMPARE_HEADER,
    METRICS_FILE, SUMMARY_FILE,
};
pub use config::{
    DataConfig, ExperimentConfig, MaskConfig, ModelConfig, RoundSection, CONFIG_VERSION, OUTPUT_DIR_ENV,
};
