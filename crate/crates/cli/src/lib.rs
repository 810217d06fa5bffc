//! Driver library: configuration files, binary checkpoints, and the
//! command implementations behind the `shiftlab` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
