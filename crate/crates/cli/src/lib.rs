//! Command-line front end for the neuromuscular simulation engine: configure
//! and run coupled scenarios, record their trajectories as datasets, inspect
//! those datasets, plan process grids, and reproduce the numerical studies.

pub mod config;
pub mod error;
pub mod inspect;
pub mod plan;
pub mod run;
pub mod study;
