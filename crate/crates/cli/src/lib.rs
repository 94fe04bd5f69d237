//! Harness around the matrix-free MPC solver: built-in models, a
//! plant simulator, closed-loop runs, dense-oracle checks and benchmarks.

pub mod bench;
pub mod check;
pub mod cli;
pub mod config;
pub mod models;
pub mod plant;
pub mod sim;
