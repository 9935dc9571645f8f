//! File formats, a thread pool and the command line around `rwenas-core`.

pub mod cifar;
pub mod commands;
pub mod config;
pub mod pool;
pub mod table;

pub use rwenas_core as core;
