//! Command-line driver: world simulation, EM SLAM runs and evaluation.

pub mod commands;
pub mod io;
