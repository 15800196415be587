//! Training, evaluation and verification drivers behind the command line.

pub mod checkpoint;
pub mod compare;
pub mod config;
pub mod eval;
pub mod gradcheck_suite;
pub mod optim;
pub mod train;
