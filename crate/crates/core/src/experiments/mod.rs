//! Configuration, experiment runner, CSV artifacts, sweeps and oracles.

pub mod config;
pub mod oracle;
pub mod runner;

pub use config::{ExperimentConfig, Mode};
pub use oracle::{degeneracy_check, finite_difference_check, OracleCheck};
pub use runner::{run_experiment, run_sweep, summarize, sweep_csv, ExperimentOutput, SummaryRow, SweepAxis, SweepPoint};
