//! 1D diffusion along a single fiber.
//!
//! Linear finite elements with a lumped (diagonal) mass matrix discretize
//! `−∂x(σ_eff ∂x ·)` with zero-flux ends, which keeps the implicit systems
//! strictly tridiagonal. Two time steppers are provided — implicit Euler and
//! Crank–Nicolson — plus three interchangeable linear solvers (Thomas,
//! conjugate gradients, restarted GMRES) so their cost can be compared on the
//! same systems.
//!
//! The production steppers solve the row-normalized form
//! `(I + dt·c·M⁻¹K) v⁺ = rhs` with `c = 1/(A_m·C_m)`, so a fiber with zero
//! conductivity reproduces its input bit for bit. [`build_implicit_euler_system`]
//! instead returns the symmetric form `(M + dt·c·K) v⁺ = M v` for the solver
//! comparison, where conjugate gradients requires symmetry.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors from fiber assembly and linear solves.
#[derive(Debug, Error, PartialEq)]
pub enum FiberError {
    #[error("invalid fiber mesh: {0}")]
    InvalidMesh(&'static str),
    #[error("singular tridiagonal system")]
    SingularSystem,
    #[error("iterative solver stalled")]
    SolverStalled,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(&'static str),
}

/// Geometry and electrical constants of one fiber.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiberMesh {
    /// Node positions along the fiber in cm, strictly increasing.
    pub node_x: Vec<f64>,
    /// Effective longitudinal conductivity, mS/cm.
    pub sigma_eff: f64,
    /// Fiber surface-to-volume ratio, 1/cm.
    pub a_m: f64,
    /// Membrane capacitance, µF/cm².
    pub c_m: f64,
}

impl FiberMesh {
    /// Uniformly spaced nodes over `[0, length]`.
    pub fn uniform(n_nodes: usize, length: f64, sigma_eff: f64, a_m: f64, c_m: f64) -> Self {
        let h = length / (n_nodes.max(2) - 1) as f64;
        Self {
            node_x: (0..n_nodes).map(|i| i as f64 * h).collect(),
            sigma_eff,
            a_m,
            c_m,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.node_x.len()
    }

    /// Surface-scaling factor `c = 1/(A_m·C_m)` of the diffusion term.
    pub fn surface_scaling(&self) -> f64 {
        1.0 / (self.a_m * self.c_m)
    }

    /// Zero conductivity is allowed: it turns diffusion off (the steppers
    /// become the identity), which is useful for isolating the reaction part.
    pub fn validate(&self) -> Result<(), FiberError> {
        if self.node_x.len() < 2 {
            return Err(FiberError::InvalidMesh("need at least two nodes"));
        }
        if !self.node_x.windows(2).all(|w| w[1] > w[0]) {
            return Err(FiberError::InvalidMesh(
                "node positions must be strictly increasing",
            ));
        }
        if !(self.sigma_eff >= 0.0) {
            return Err(FiberError::InvalidMesh("sigma_eff must be >= 0"));
        }
        if !(self.a_m > 0.0 && self.c_m > 0.0) {
            return Err(FiberError::InvalidMesh("a_m and c_m must be positive"));
        }
        Ok(())
    }
}

/// A tridiagonal operator stored as three diagonals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tridiagonal {
    /// Sub-diagonal, length n−1 (`sub[i]` couples row i+1 to column i).
    pub sub: Vec<f64>,
    /// Main diagonal, length n.
    pub diag: Vec<f64>,
    /// Super-diagonal, length n−1 (`sup[i]` couples row i to column i+1).
    pub sup: Vec<f64>,
}

impl Tridiagonal {
    pub fn zeros(n: usize) -> Self {
        Self {
            sub: vec![0.0; n.saturating_sub(1)],
            diag: vec![0.0; n],
            sup: vec![0.0; n.saturating_sub(1)],
        }
    }

    pub fn n(&self) -> usize {
        self.diag.len()
    }

    pub fn validate(&self) -> Result<(), FiberError> {
        let n = self.n();
        if n == 0 || self.sub.len() + 1 != n || self.sup.len() + 1 != n {
            return Err(FiberError::ShapeMismatch("diagonal lengths inconsistent"));
        }
        Ok(())
    }

    /// `y = A·x`.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        let n = self.n();
        for i in 0..n {
            let mut acc = self.diag[i] * x[i];
            if i > 0 {
                acc += self.sub[i - 1] * x[i - 1];
            }
            if i + 1 < n {
                acc += self.sup[i] * x[i + 1];
            }
            y[i] = acc;
        }
    }
}

/// A tridiagonal linear system `A x = rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct TridiagonalSystem {
    pub matrix: Tridiagonal,
    pub rhs: Vec<f64>,
}

impl TridiagonalSystem {
    pub fn validate(&self) -> Result<(), FiberError> {
        self.matrix.validate()?;
        if self.rhs.len() != self.matrix.n() {
            return Err(FiberError::ShapeMismatch("rhs length != matrix size"));
        }
        Ok(())
    }
}

/// Stiffness operator of `−∂x(σ_eff ∂x·)` with zero-flux ends: linear FEM on
/// the fiber mesh. Symmetric positive semidefinite with zero row sums.
pub fn assemble_diffusion(mesh: &FiberMesh) -> Result<Tridiagonal, FiberError> {
    mesh.validate()?;
    let n = mesh.n_nodes();
    let mut k = Tridiagonal::zeros(n);
    for e in 0..n - 1 {
        let h = mesh.node_x[e + 1] - mesh.node_x[e];
        let w = mesh.sigma_eff / h;
        k.diag[e] += w;
        k.diag[e + 1] += w;
        k.sub[e] -= w;
        k.sup[e] -= w;
    }
    Ok(k)
}

/// Lumped mass vector: `m_i = (h_{i−1} + h_i)/2`, with a single half-element
/// at each end.
pub fn lumped_mass(mesh: &FiberMesh) -> Vec<f64> {
    let n = mesh.n_nodes();
    let mut m = vec![0.0; n];
    for e in 0..n - 1 {
        let half = 0.5 * (mesh.node_x[e + 1] - mesh.node_x[e]);
        m[e] += half;
        m[e + 1] += half;
    }
    m
}

enum StepperKind {
    ImplicitEuler,
    /// Holds the row-normalized, dt/2-scaled stiffness for the explicit half
    /// of the trapezoidal rule.
    CrankNicolson(Tridiagonal),
}

/// A diffusion time stepper with its implicit matrix factored once.
///
/// Construction performs the Thomas forward elimination on
/// `I + θ·dt·c·M⁻¹K` (θ = 1 for implicit Euler, ½ for Crank–Nicolson);
/// each [`step`](Self::step) is then a single O(n) sweep. Row
/// normalization by the lumped mass makes a zero-conductivity stepper the
/// bitwise identity.
pub struct DiffusionStepper {
    /// Modified super-diagonal from the forward elimination.
    c_prime: Vec<f64>,
    /// Elimination denominators (pivot values).
    den: Vec<f64>,
    /// Sub-diagonal of the normalized implicit matrix.
    sub: Vec<f64>,
    kind: StepperKind,
    scratch: Vec<f64>,
}

impl DiffusionStepper {
    pub fn implicit_euler(mesh: &FiberMesh, dt: f64) -> Result<Self, FiberError> {
        Self::new(mesh, dt, 1.0, false)
    }

    pub fn crank_nicolson(mesh: &FiberMesh, dt: f64) -> Result<Self, FiberError> {
        Self::new(mesh, dt, 0.5, true)
    }

    fn new(mesh: &FiberMesh, dt: f64, theta: f64, trapezoidal: bool) -> Result<Self, FiberError> {
        if !(dt > 0.0) {
            return Err(FiberError::InvalidMesh("dt must be positive"));
        }
        let k = assemble_diffusion(mesh)?;
        let m = lumped_mass(mesh);
        let n = k.n();
        let scale = theta * dt * mesh.surface_scaling();

        // Row-normalized implicit matrix I + scale·M⁻¹K.
        let mut a = Tridiagonal::zeros(n);
        for i in 0..n {
            a.diag[i] = 1.0 + scale * k.diag[i] / m[i];
        }
        for i in 0..n - 1 {
            a.sup[i] = scale * k.sup[i] / m[i];
            a.sub[i] = scale * k.sub[i] / m[i + 1];
        }

        // Thomas forward elimination, reusable across solves.
        let mut c_prime = vec![0.0; n - 1];
        let mut den = vec![0.0; n];
        den[0] = a.diag[0];
        if den[0] == 0.0 {
            return Err(FiberError::SingularSystem);
        }
        c_prime[0] = a.sup[0] / den[0];
        for i in 1..n {
            den[i] = a.diag[i] - a.sub[i - 1] * c_prime[i - 1];
            if den[i] == 0.0 {
                return Err(FiberError::SingularSystem);
            }
            if i < n - 1 {
                c_prime[i] = a.sup[i] / den[i];
            }
        }

        let kind = if trapezoidal {
            // Explicit half: rhs = v − scale·M⁻¹K·v, with the same row
            // normalization as the implicit half.
            let mut b = k;
            for i in 0..n {
                b.diag[i] *= scale / m[i];
            }
            for i in 0..n - 1 {
                b.sup[i] *= scale / m[i];
                b.sub[i] *= scale / m[i + 1];
            }
            StepperKind::CrankNicolson(b)
        } else {
            StepperKind::ImplicitEuler
        };

        Ok(Self {
            c_prime,
            den,
            sub: a.sub,
            kind,
            scratch: vec![0.0; n],
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.den.len()
    }

    /// Advances `v` by one diffusion step in place.
    pub fn step(&mut self, v: &mut [f64]) -> Result<(), FiberError> {
        let n = self.den.len();
        if v.len() != n {
            return Err(FiberError::ShapeMismatch("state length != stepper size"));
        }
        match &self.kind {
            StepperKind::ImplicitEuler => self.scratch.copy_from_slice(v),
            StepperKind::CrankNicolson(b) => {
                b.matvec(v, &mut self.scratch);
                for i in 0..n {
                    self.scratch[i] = v[i] - self.scratch[i];
                }
            }
        }
        // Forward substitution into v, then back substitution in place.
        v[0] = self.scratch[0] / self.den[0];
        for i in 1..n {
            v[i] = (self.scratch[i] - self.sub[i - 1] * v[i - 1]) / self.den[i];
        }
        for i in (0..n - 1).rev() {
            v[i] -= self.c_prime[i] * v[i + 1];
        }
        Ok(())
    }
}

/// One implicit Euler diffusion step: solves `(M + dt·c·K) v⁺ = M v`.
pub fn implicit_euler_step(v: &[f64], dt: f64, mesh: &FiberMesh) -> Result<Vec<f64>, FiberError> {
    let mut stepper = DiffusionStepper::implicit_euler(mesh, dt)?;
    let mut out = v.to_vec();
    stepper.step(&mut out)?;
    Ok(out)
}

/// One Crank–Nicolson diffusion step:
/// solves `(M + dt/2·c·K) v⁺ = (M − dt/2·c·K) v`.
pub fn crank_nicolson_step(v: &[f64], dt: f64, mesh: &FiberMesh) -> Result<Vec<f64>, FiberError> {
    let mut stepper = DiffusionStepper::crank_nicolson(mesh, dt)?;
    let mut out = v.to_vec();
    stepper.step(&mut out)?;
    Ok(out)
}

/// The symmetric positive-definite implicit Euler system
/// `(M + dt·c·K) v⁺ = M v`, kept un-normalized so conjugate gradients
/// applies. Used by the solver comparison.
pub fn build_implicit_euler_system(
    v: &[f64],
    dt: f64,
    mesh: &FiberMesh,
) -> Result<TridiagonalSystem, FiberError> {
    if v.len() != mesh.n_nodes() {
        return Err(FiberError::ShapeMismatch("state length != mesh size"));
    }
    if !(dt > 0.0) {
        return Err(FiberError::InvalidMesh("dt must be positive"));
    }
    let mut a = assemble_diffusion(mesh)?;
    let m = lumped_mass(mesh);
    let scale = dt * mesh.surface_scaling();
    let n = a.n();
    for i in 0..n {
        a.diag[i] = m[i] + scale * a.diag[i];
    }
    for i in 0..n - 1 {
        a.sub[i] *= scale;
        a.sup[i] *= scale;
    }
    let rhs = v.iter().zip(m.iter()).map(|(vi, mi)| mi * vi).collect();
    Ok(TridiagonalSystem { matrix: a, rhs })
}

/// Linear solver selection for [`linear_solve`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveMethod {
    /// Direct tridiagonal elimination, O(n).
    Thomas,
    /// Plain conjugate gradients; requires a symmetric positive-definite
    /// matrix.
    ConjugateGradient,
    /// Restarted GMRES with the given restart length.
    Gmres { restart: usize },
}

const MAX_ITERATIONS: usize = 10_000;

/// Solves the tridiagonal system with the chosen method. Iterative methods
/// stop at `‖Ax − b‖/‖b‖ ≤ rel_tol`; Thomas is exact up to round-off and
/// ignores `rel_tol`.
pub fn linear_solve(
    system: &TridiagonalSystem,
    method: SolveMethod,
    rel_tol: f64,
) -> Result<Vec<f64>, FiberError> {
    system.validate()?;
    match method {
        SolveMethod::Thomas => thomas_solve(&system.matrix, &system.rhs),
        SolveMethod::ConjugateGradient => cg_solve(&system.matrix, &system.rhs, rel_tol),
        SolveMethod::Gmres { restart } => gmres_solve(&system.matrix, &system.rhs, restart, rel_tol),
    }
}

fn thomas_solve(a: &Tridiagonal, rhs: &[f64]) -> Result<Vec<f64>, FiberError> {
    let n = a.n();
    let mut c_prime = vec![0.0; n - 1];
    let mut x = vec![0.0; n];
    let mut den = a.diag[0];
    if den == 0.0 {
        return Err(FiberError::SingularSystem);
    }
    if n > 1 {
        c_prime[0] = a.sup[0] / den;
    }
    x[0] = rhs[0] / den;
    for i in 1..n {
        den = a.diag[i] - a.sub[i - 1] * c_prime[i - 1];
        if den == 0.0 {
            return Err(FiberError::SingularSystem);
        }
        if i < n - 1 {
            c_prime[i] = a.sup[i] / den;
        }
        x[i] = (rhs[i] - a.sub[i - 1] * x[i - 1]) / den;
    }
    for i in (0..n - 1).rev() {
        x[i] -= c_prime[i] * x[i + 1];
    }
    Ok(x)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cg_solve(a: &Tridiagonal, b: &[f64], rel_tol: f64) -> Result<Vec<f64>, FiberError> {
    let n = a.n();
    let b_norm = norm(b);
    if b_norm == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr = dot(&r, &r);
    for _ in 0..MAX_ITERATIONS {
        if rr.sqrt() <= rel_tol * b_norm {
            return Ok(x);
        }
        a.matvec(&p, &mut ap);
        let p_ap = dot(&p, &ap);
        if !(p_ap > 0.0) {
            return Err(FiberError::SolverStalled);
        }
        let alpha = rr / p_ap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    Err(FiberError::SolverStalled)
}

fn gmres_solve(
    a: &Tridiagonal,
    b: &[f64],
    restart: usize,
    rel_tol: f64,
) -> Result<Vec<f64>, FiberError> {
    let n = a.n();
    let m = restart.max(1).min(n);
    let b_norm = norm(b);
    if b_norm == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let mut x = vec![0.0; n];
    let mut r = vec![0.0; n];
    // Krylov basis, Hessenberg columns (rotated in place), Givens pairs.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
    let mut h_cols: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut givens: Vec<(f64, f64)> = Vec::with_capacity(m);
    let mut g = vec![0.0; m + 1];
    let mut total_iters = 0usize;

    loop {
        a.matvec(&x, &mut r);
        for i in 0..n {
            r[i] = b[i] - r[i];
        }
        let beta = norm(&r);
        if beta <= rel_tol * b_norm {
            return Ok(x);
        }
        if total_iters >= MAX_ITERATIONS {
            return Err(FiberError::SolverStalled);
        }

        basis.clear();
        h_cols.clear();
        givens.clear();
        g.iter_mut().for_each(|v| *v = 0.0);
        g[0] = beta;
        basis.push(r.iter().map(|v| v / beta).collect());

        let mut inner = 0usize;
        for j in 0..m {
            total_iters += 1;
            inner = j + 1;
            let mut w = vec![0.0; n];
            a.matvec(&basis[j], &mut w);
            let mut h = vec![0.0; j + 2];
            // Modified Gram–Schmidt.
            for (i, v) in basis.iter().enumerate() {
                h[i] = dot(&w, v);
                for k in 0..n {
                    w[k] -= h[i] * v[k];
                }
            }
            let w_norm = norm(&w);
            h[j + 1] = w_norm;

            // Apply accumulated rotations, then the new one.
            for (i, (c, s)) in givens.iter().enumerate() {
                let t = c * h[i] + s * h[i + 1];
                h[i + 1] = -s * h[i] + c * h[i + 1];
                h[i] = t;
            }
            let (c, s) = {
                let (hi, hj) = (h[j], h[j + 1]);
                let denom = (hi * hi + hj * hj).sqrt();
                if denom == 0.0 {
                    (1.0, 0.0)
                } else {
                    (hi / denom, hj / denom)
                }
            };
            let breakdown = h[j + 1] == 0.0;
            h[j] = c * h[j] + s * h[j + 1];
            h[j + 1] = 0.0;
            let gj = g[j];
            g[j] = c * gj;
            g[j + 1] = -s * gj;
            givens.push((c, s));
            h_cols.push(h);

            if breakdown || g[j + 1].abs() <= rel_tol * b_norm || total_iters >= MAX_ITERATIONS {
                break;
            }
            for val in w.iter_mut() {
                *val /= w_norm;
            }
            basis.push(w);
        }

        // Back substitution on the rotated (upper-triangular) Hessenberg.
        let mut y = vec![0.0; inner];
        for i in (0..inner).rev() {
            let mut acc = g[i];
            for (k, y_k) in y.iter().enumerate().skip(i + 1) {
                acc -= h_cols[k][i] * y_k;
            }
            y[i] = acc / h_cols[i][i];
        }
        for (j, y_j) in y.iter().enumerate() {
            for k in 0..n {
                x[k] += y_j * basis[j][k];
            }
        }
    }
}
