//! Synthetic data, training stages, checkpoints and the ablation runner
//! around the `diffperc-core` model components.

pub mod ablation;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod io;
pub mod model;
pub mod optim;
pub mod tasks;
pub mod train;

pub use diffperc_core as core;
