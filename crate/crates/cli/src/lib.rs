//! Experiment driver for the session recommender: configuration, data
//! preparation and the command implementations behind the `awgnn` binary.

pub mod commands;
pub mod config;
pub mod pipeline;

pub use commands::{cmd_eval, cmd_recommend, cmd_sweep, cmd_synth, cmd_train, SweepRow};
pub use config::{parse_override, RunConfig, Variant};
