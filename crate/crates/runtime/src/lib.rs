//! Parallel execution of the coupled fiber–muscle simulation.
//!
//! The element grid is split into boxes by a [`PartitionLayout`]; each
//! partition becomes one worker thread and a coordinating main thread runs
//! the global equilibrium solve. Workers share no mutable state — every
//! exchange travels over channels, following a [`halo::HaloPlan`] built up
//! front and validated for mutual consistency. All floating-point work runs
//! in a fixed deterministic order, so a parallel run reproduces the serial
//! one bitwise regardless of the layout.
//!
//! [`PartitionLayout`]: musim_core::partition::PartitionLayout

use musim_core::fiber::FiberError;
use musim_core::partition::PartitionError;
use musim_core::splitting::SplittingError;
use thiserror::Error;

pub mod halo;
pub mod parallel;
pub mod report;
pub mod scaling;

#[derive(Debug, Error)]
pub enum RuntimeError {
    /// A send has no matching receive (or vice versa), or an exchange
    /// delivered data the plan does not account for.
    #[error("halo protocol violation")]
    HaloProtocolViolation,
    /// An iterative solver ran out of iterations or lost positivity.
    #[error("solver stall")]
    SolverStall,
    #[error("infeasible layout")]
    Infeasible(#[from] PartitionError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(&'static str),
    #[error("inconsistent timing report: {0}")]
    InvalidReport(&'static str),
    #[error(transparent)]
    Simulation(#[from] SplittingError),
    /// A worker thread reported an error; the run was torn down.
    #[error("worker {rank} failed: {message}")]
    WorkerFailed { rank: usize, message: String },
    /// A peer failure aborted this worker mid-run.
    #[error("aborted by peer failure")]
    Aborted,
}

impl From<FiberError> for RuntimeError {
    fn from(e: FiberError) -> Self {
        match e {
            FiberError::SolverStalled => RuntimeError::SolverStall,
            other => RuntimeError::Simulation(other.into()),
        }
    }
}
