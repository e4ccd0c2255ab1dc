//! Synthetic task stream, detector, incremental training loop and the
//! experiment runners built on them.

pub mod config;
pub mod evaluate;
pub mod experiment;
pub mod io;
pub mod model;
pub mod report;
pub mod stats;
pub mod train;
pub mod world;
