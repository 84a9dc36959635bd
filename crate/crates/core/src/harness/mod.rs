//! Experiment harness: configuration, runs, metrics files and comparison tables.

pub mod compare;
pub mod config;
pub mod metrics;
pub mod run;

pub use compare::{compare, compare_and_write, parse_table, ComparisonRow, TableSpec};
pub use config::{parse_config, parse_config_str, ExperimentConfig, Scheme};
pub use metrics::{convergence_round, final_accuracy, MetricsRow};
pub use run::{load_data, run, run_seed, RunSummary};
