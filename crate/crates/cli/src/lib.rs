//! Configuration, orchestration and report writing for the `bermudan` tool.

pub mod config;
pub mod report;
pub mod run;

pub use config::{ConfigError, ExperimentConfig, Overrides, Scale};
pub use run::{run_hedge, run_price, HedgeOutcome, PriceRun};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const VALIDATION: i32 = 3;
}
