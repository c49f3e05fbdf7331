//! Experiment orchestration on synthetic data.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod overhead;
pub mod runner;
pub mod sweep;

pub use config::{ExperimentConfig, Mode};
pub use metrics::RoundRecord;
pub use overhead::{communication_overhead, Overhead};
pub use runner::{
    prepare_data, run_experiment, run_experiment_with, ExperimentOutput, PreparedData,
};
pub use sweep::{ablation_sweep, ablation_sweep_with, SweepAxis, SweepTable};
