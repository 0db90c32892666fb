//! Multiscale skeletal-muscle simulation core.
//!
//! The crate is organized around the three spatial scales of the model and the
//! machinery that couples them:
//!
//! - [`cell`] — membrane kinetics at a single fiber node (0D): an excitable
//!   ionic model behind a pluggable interface, explicit Euler/Heun steppers,
//!   and the activation mapping from cross-bridge state to contraction drive.
//! - [`fiber`] — action-potential diffusion along one fiber (1D): linear FEM
//!   assembly with a lumped mass matrix, implicit Euler and Crank–Nicolson
//!   steps, and tridiagonal/iterative linear solvers.
//! - [`mechanics`] — quasi-static hyperelastic continuum (3D): trilinear
//!   hexahedra, transversely isotropic Mooney–Rivlin material with active
//!   fiber stress and penalty incompressibility, Newton with line search.
//! - [`splitting`] — the reaction–diffusion operator splitting (Godunov and
//!   Strang) and the staggered 0D/1D/3D coupled step.
//! - [`transfer`] — embedding of fiber nodes into the 3D element grid,
//!   interpolation of positions, half-sarcomere lengths, and homogenization
//!   of activation onto elements.
//! - [`partition`] — axis-aligned domain decomposition planning and its
//!   communication-cost model.
//!
//! Everything here is deterministic and single-threaded; concurrency lives in
//! the runtime crate, which consumes these operations unchanged.

pub mod cell;
pub mod fiber;
pub mod mechanics;
pub mod partition;
pub mod splitting;
pub mod transfer;
