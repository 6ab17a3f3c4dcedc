//! Experiment surface: datasets, optimizers, training loops, sweeps and the
//! on-disk formats the CLI reads and writes.

pub mod config;
pub mod data;
pub mod experiment;
pub mod gradcheck;
pub mod optim;
pub mod rng;
pub mod sweep;
