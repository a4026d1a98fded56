//! Experiment harness: single runs, parameter sweeps, and plot-ready report
//! extraction, on top of the core simulator.
//!
//! Exit codes: 0 success, 1 validation failure, 2 runtime failure,
//! 3 partial sweep failure.

pub mod report_cmd;
pub mod run_cmd;
pub mod sweep_cmd;

use std::path::PathBuf;

use fedshrink_core::Error as CoreError;

pub use report_cmd::cmd_report;
pub use run_cmd::cmd_run;
pub use sweep_cmd::cmd_sweep;

/// Harness-level failures, ranked by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad config / sweep spec / missing inputs. Exit 1.
    Validation(String),
    /// A run failed mid-flight. Exit 2.
    Runtime(String),
    /// Some sweep cells failed, others completed. Exit 3.
    PartialSweep(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::PartialSweep(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) | CliError::PartialSweep(m) => m,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.message())
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config { .. } => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

/// Global CLI flags shared by the subcommands.
#[derive(Debug, Clone, Default)]
pub struct GlobalOpts {
    /// Replaces the run seeds (model init, partition, FL loop); for sweeps
    /// it replaces the whole seed list.
    pub seed_override: Option<u64>,
    /// Overrides the config's output directory.
    pub output_dir: Option<PathBuf>,
    /// Worker threads: client training for `run`, concurrent cells for
    /// `sweep`.
    pub threads: usize,
}

impl GlobalOpts {
    pub fn threads(&self) -> usize {
        self.threads.max(1)
    }
}
