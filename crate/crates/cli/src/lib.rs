//! Benchmarks, component profiling and the command-line front end.

pub mod bench;
pub mod cli;
pub mod profile;
