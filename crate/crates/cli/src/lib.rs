//! Pipeline commands, run-manifest bookkeeping, and configuration loading
//! for the `cotcap` binary. The library form exists so integration tests can
//! drive commands in-process and inspect their artifacts.

pub mod commands;
pub mod config_io;
pub mod error;
pub mod manifest;
