//! Host-side companion to `hetfed-core`: checkpoints, JSON session configs,
//! CSV output, wall-clock timing, a rayon-backed executor, allocator
//! statistics and the command implementations behind the `hetfed` binary.

pub mod alloc_stats;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod csvio;
pub mod error;
pub mod exec;
pub mod timing;

pub use error::CliError;
