//! Quasi-static hyperelastic mechanics of the muscle volume.
//!
//! Trilinear (Q1) hexahedral elements with 2×2×2 Gauss quadrature discretize
//! a fiber-reinforced Mooney–Rivlin solid: isochoric invariants `Ī₁, Ī₂`, an
//! anisotropic reinforcement active in fiber tension, a volumetric penalty
//! whose first Piola–Kirchhoff contribution is `κ(J−1)F⁻ᵀ`, and an active
//! stress `σ_max·γ̄·(F a₀ ⊗ a₀)/λ_f` along the fiber direction. All stress
//! and tangent expressions are analytic derivatives of one potential (at
//! frozen activation), so the assembled tangent is symmetric.
//!
//! Equilibrium is found with Newton's method and a backtracking line search.
//! The tangent solve is a dense LU at desk scale, with a matrix-free
//! Jacobi-preconditioned CG fallback for larger meshes.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MechanicsError {
    #[error("element inversion")]
    ElementInversion,
    #[error("mechanics solve failed")]
    SolveFailed { iterations: usize, residual: f64 },
    #[error("invalid mesh: {0}")]
    InvalidMesh(&'static str),
    #[error("invalid material: {0}")]
    InvalidMaterial(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(&'static str),
}

/// Material constants, all in kPa.
///
/// `kappa` is a near-incompressibility penalty and should dominate the
/// deviatoric stiffness (a ratio `kappa/c1` of at least ~100 keeps volume
/// changes below ~1%); smaller ratios are permitted for single-branch
/// diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaterialParams {
    /// First Mooney–Rivlin coefficient.
    pub c1: f64,
    /// Second Mooney–Rivlin coefficient.
    pub c2: f64,
    /// Anisotropic fiber reinforcement, active only in tension.
    pub b: f64,
    /// Volumetric penalty.
    pub kappa: f64,
    /// Maximal active fiber stress.
    pub sigma_max: f64,
}

impl Default for MaterialParams {
    fn default() -> Self {
        Self {
            c1: 3.56,
            c2: 3.86,
            b: 30.0,
            kappa: 1000.0,
            sigma_max: 30.0,
        }
    }
}

impl MaterialParams {
    pub fn validate(&self) -> Result<(), MechanicsError> {
        let all = [self.c1, self.c2, self.b, self.kappa, self.sigma_max];
        if all.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(MechanicsError::InvalidMaterial(
                "material constants must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

/// Gauss abscissa of the 2-point rule.
const GP: f64 = 0.577_350_269_189_625_8; // 1/√3

/// 2×2×2 Gauss points in the reference cube, unit weights, ordered like the
/// element corners (x fastest).
pub const GAUSS_POINTS: [[f64; 3]; 8] = [
    [-GP, -GP, -GP],
    [GP, -GP, -GP],
    [-GP, GP, -GP],
    [GP, GP, -GP],
    [-GP, -GP, GP],
    [GP, -GP, GP],
    [-GP, GP, GP],
    [GP, GP, GP],
];

/// Corner sign triplet of local node `a` (x fastest).
#[inline]
fn corner_signs(a: usize) -> [f64; 3] {
    [
        if a & 1 == 0 { -1.0 } else { 1.0 },
        if a & 2 == 0 { -1.0 } else { 1.0 },
        if a & 4 == 0 { -1.0 } else { 1.0 },
    ]
}

/// Trilinear shape values at a local point.
pub fn shape_values(xi: &[f64; 3]) -> [f64; 8] {
    let mut n = [0.0; 8];
    for (a, na) in n.iter_mut().enumerate() {
        let s = corner_signs(a);
        *na = 0.125 * (1.0 + s[0] * xi[0]) * (1.0 + s[1] * xi[1]) * (1.0 + s[2] * xi[2]);
    }
    n
}

/// Trilinear shape gradients w.r.t. the local coordinates.
pub fn shape_local_gradients(xi: &[f64; 3]) -> [[f64; 3]; 8] {
    let mut g = [[0.0; 3]; 8];
    for (a, ga) in g.iter_mut().enumerate() {
        let s = corner_signs(a);
        ga[0] = 0.125 * s[0] * (1.0 + s[1] * xi[1]) * (1.0 + s[2] * xi[2]);
        ga[1] = 0.125 * (1.0 + s[0] * xi[0]) * s[1] * (1.0 + s[2] * xi[2]);
        ga[2] = 0.125 * (1.0 + s[0] * xi[0]) * (1.0 + s[1] * xi[1]) * s[2];
    }
    g
}

/// Hexahedral element grid over a box, with the sample's fixed faces: both
/// faces normal to x, plus the y = 0 and z = 0 faces, carry zero
/// displacement; the remaining two faces are free.
#[derive(Debug, Clone, PartialEq)]
pub struct MuscleMesh {
    /// Elements per axis.
    pub dims: [usize; 3],
    /// Reference node coordinates, cm; node index x-fastest.
    pub node_coords: Vec<[f64; 3]>,
    /// Fiber direction, unit.
    pub a0: [f64; 3],
    /// Per-node zero-displacement flag.
    pub dirichlet: Vec<bool>,
}

impl MuscleMesh {
    /// Uniform box grid with the standard fixed faces.
    pub fn box_grid(dims: [usize; 3], lengths: [f64; 3], a0: [f64; 3]) -> Result<Self, MechanicsError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(MechanicsError::InvalidMesh("element dims must be positive"));
        }
        if lengths.iter().any(|&l| !(l > 0.0)) {
            return Err(MechanicsError::InvalidMesh("box lengths must be positive"));
        }
        let n = [dims[0] + 1, dims[1] + 1, dims[2] + 1];
        let h = [
            lengths[0] / dims[0] as f64,
            lengths[1] / dims[1] as f64,
            lengths[2] / dims[2] as f64,
        ];
        let mut node_coords = Vec::with_capacity(n[0] * n[1] * n[2]);
        let mut dirichlet = Vec::with_capacity(n[0] * n[1] * n[2]);
        for iz in 0..n[2] {
            for iy in 0..n[1] {
                for ix in 0..n[0] {
                    node_coords.push([ix as f64 * h[0], iy as f64 * h[1], iz as f64 * h[2]]);
                    dirichlet.push(ix == 0 || ix == n[0] - 1 || iy == 0 || iz == 0);
                }
            }
        }
        let mesh = Self {
            dims,
            node_coords,
            a0,
            dirichlet,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn n_nodes_per_axis(&self) -> [usize; 3] {
        [self.dims[0] + 1, self.dims[1] + 1, self.dims[2] + 1]
    }

    pub fn n_nodes(&self) -> usize {
        let n = self.n_nodes_per_axis();
        n[0] * n[1] * n[2]
    }

    pub fn n_elements(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn node_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        let n = self.n_nodes_per_axis();
        ix + n[0] * (iy + n[1] * iz)
    }

    #[inline]
    pub fn element_index(&self, ex: usize, ey: usize, ez: usize) -> usize {
        ex + self.dims[0] * (ey + self.dims[1] * ez)
    }

    #[inline]
    pub fn element_grid_pos(&self, e: usize) -> [usize; 3] {
        let ex = e % self.dims[0];
        let rest = e / self.dims[0];
        [ex, rest % self.dims[1], rest / self.dims[1]]
    }

    /// Global node ids of an element's corners, x fastest.
    pub fn element_nodes(&self, e: usize) -> [usize; 8] {
        let [ex, ey, ez] = self.element_grid_pos(e);
        let mut nodes = [0usize; 8];
        for (a, node) in nodes.iter_mut().enumerate() {
            *node = self.node_index(ex + (a & 1), ey + ((a >> 1) & 1), ez + ((a >> 2) & 1));
        }
        nodes
    }

    pub fn validate(&self) -> Result<(), MechanicsError> {
        if self.n_nodes() != self.node_coords.len() || self.n_nodes() != self.dirichlet.len() {
            return Err(MechanicsError::InvalidMesh("node array lengths inconsistent"));
        }
        let norm = (self.a0[0] * self.a0[0] + self.a0[1] * self.a0[1] + self.a0[2] * self.a0[2])
            .sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(MechanicsError::InvalidMesh("a0 must be a unit vector"));
        }
        // Reference-configuration element Jacobians must be positive.
        for e in 0..self.n_elements() {
            let nodes = self.element_nodes(e);
            for xi in &GAUSS_POINTS {
                let grads = shape_local_gradients(xi);
                let mut jac = Matrix3::<f64>::zeros();
                for (a, &node) in nodes.iter().enumerate() {
                    let x = self.node_coords[node];
                    for j in 0..3 {
                        for k in 0..3 {
                            jac[(j, k)] += x[j] * grads[a][k];
                        }
                    }
                }
                if !(jac.determinant() > 0.0) {
                    return Err(MechanicsError::InvalidMesh(
                        "element has non-positive reference Jacobian",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Axis-aligned bounding box of the reference configuration.
    pub fn bounding_box(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for x in &self.node_coords {
            for d in 0..3 {
                lo[d] = lo[d].min(x[d]);
                hi[d] = hi[d].max(x[d]);
            }
        }
        (lo, hi)
    }

    pub fn dof_map(&self) -> DofMap {
        let mut base = vec![None; self.n_nodes()];
        let mut next = 0usize;
        for (node, b) in base.iter_mut().enumerate() {
            if !self.dirichlet[node] {
                *b = Some(next);
                next += 3;
            }
        }
        DofMap { base, n_free: next }
    }
}

/// Mapping from (node, component) to the free-DOF vector.
#[derive(Debug, Clone)]
pub struct DofMap {
    base: Vec<Option<usize>>,
    n_free: usize,
}

impl DofMap {
    #[inline]
    pub fn dof(&self, node: usize, comp: usize) -> Option<usize> {
        self.base[node].map(|b| b + comp)
    }

    pub fn n_free(&self) -> usize {
        self.n_free
    }
}

/// Nodal displacement field on a [`MuscleMesh`].
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    /// Per-node displacement, cm.
    pub u: Vec<[f64; 3]>,
}

impl DisplacementField {
    pub fn zeros(mesh: &MuscleMesh) -> Self {
        Self {
            u: vec![[0.0; 3]; mesh.n_nodes()],
        }
    }

    /// Zero on every constrained node?
    pub fn validate(&self, mesh: &MuscleMesh) -> Result<(), MechanicsError> {
        if self.u.len() != mesh.n_nodes() {
            return Err(MechanicsError::ShapeMismatch("field length != node count"));
        }
        for (node, fixed) in mesh.dirichlet.iter().enumerate() {
            if *fixed && self.u[node] != [0.0; 3] {
                return Err(MechanicsError::InvalidMesh(
                    "displacement must vanish on constrained nodes",
                ));
            }
        }
        Ok(())
    }

    pub fn from_free_vector(mesh: &MuscleMesh, map: &DofMap, free: &[f64]) -> Self {
        let mut field = Self::zeros(mesh);
        for node in 0..mesh.n_nodes() {
            if let Some(base) = map.base[node] {
                for c in 0..3 {
                    field.u[node][c] = free[base + c];
                }
            }
        }
        field
    }

    pub fn to_free_vector(&self, mesh: &MuscleMesh, map: &DofMap) -> Vec<f64> {
        let mut free = vec![0.0; map.n_free()];
        for node in 0..mesh.n_nodes() {
            if let Some(base) = map.base[node] {
                for c in 0..3 {
                    free[base + c] = self.u[node][c];
                }
            }
        }
        free
    }

    /// Maximum absolute nodal displacement component.
    pub fn max_abs(&self) -> f64 {
        self.u
            .iter()
            .flat_map(|v| v.iter())
            .fold(0.0, |acc: f64, x| acc.max(x.abs()))
    }
}

/// Per-element quadrature data: reference shape gradients and weighted
/// Jacobian determinants.
struct ElementQuadrature {
    /// `grads[q][a]` = ∇_X N_a at Gauss point q.
    grads: [[[f64; 3]; 8]; 8],
    /// Quadrature weight × reference Jacobian determinant.
    wdet: [f64; 8],
}

fn element_quadrature(mesh: &MuscleMesh, nodes: &[usize; 8]) -> Result<ElementQuadrature, MechanicsError> {
    let mut out = ElementQuadrature {
        grads: [[[0.0; 3]; 8]; 8],
        wdet: [0.0; 8],
    };
    for (q, xi) in GAUSS_POINTS.iter().enumerate() {
        let local = shape_local_gradients(xi);
        let mut jac = Matrix3::<f64>::zeros();
        for (a, &node) in nodes.iter().enumerate() {
            let x = mesh.node_coords[node];
            for j in 0..3 {
                for k in 0..3 {
                    jac[(j, k)] += x[j] * local[a][k];
                }
            }
        }
        let det = jac.determinant();
        if !(det > 0.0) {
            return Err(MechanicsError::ElementInversion);
        }
        let jac_inv = jac.try_inverse().ok_or(MechanicsError::ElementInversion)?;
        for a in 0..8 {
            for j in 0..3 {
                // ∇_X N = J⁻ᵀ ∇_ξ N.
                out.grads[q][a][j] = (0..3).map(|k| jac_inv[(k, j)] * local[a][k]).sum();
            }
        }
        out.wdet[q] = det; // unit Gauss weights
    }
    Ok(out)
}

/// Deformation gradient `F = I + ∂u/∂X` at one Gauss point of one element.
pub fn deformation_gradient(
    u: &DisplacementField,
    mesh: &MuscleMesh,
    element: usize,
    gauss: usize,
) -> Result<Matrix3<f64>, MechanicsError> {
    if element >= mesh.n_elements() || gauss >= 8 {
        return Err(MechanicsError::ShapeMismatch("element or gauss index out of range"));
    }
    if u.u.len() != mesh.n_nodes() {
        return Err(MechanicsError::ShapeMismatch("field length != node count"));
    }
    let nodes = mesh.element_nodes(element);
    let quad = element_quadrature(mesh, &nodes)?;
    let f = gradient_at(&quad, &nodes, &u.u, gauss);
    if !(f.determinant() > 0.0) {
        return Err(MechanicsError::ElementInversion);
    }
    Ok(f)
}

#[inline]
fn gradient_at(
    quad: &ElementQuadrature,
    nodes: &[usize; 8],
    u: &[[f64; 3]],
    q: usize,
) -> Matrix3<f64> {
    let mut f = Matrix3::identity();
    for (a, &node) in nodes.iter().enumerate() {
        let ua = u[node];
        let g = quad.grads[q][a];
        for i in 0..3 {
            for j in 0..3 {
                f[(i, j)] += ua[i] * g[j];
            }
        }
    }
    f
}

/// First Piola–Kirchhoff stress at a deformation gradient and activation.
pub fn pk1_stress(
    f: &Matrix3<f64>,
    gamma_bar: f64,
    params: &MaterialParams,
    a0: &Vector3<f64>,
) -> Result<Matrix3<f64>, MechanicsError> {
    let j = f.determinant();
    if !(j > 0.0) {
        return Err(MechanicsError::ElementInversion);
    }
    let f_inv = f.try_inverse().ok_or(MechanicsError::ElementInversion)?;
    let f_inv_t = f_inv.transpose();
    let c = f.transpose() * f;
    let i1 = c.trace();
    let i2 = 0.5 * (i1 * i1 - (c * c).trace());
    let j23 = j.powf(-2.0 / 3.0);
    let j43 = j23 * j23;

    // Isochoric Mooney–Rivlin.
    let mut p = (f - f_inv_t * (i1 / 3.0)) * (2.0 * params.c1 * j23);
    p += (f * i1 - f * c - f_inv_t * (2.0 * i2 / 3.0)) * (2.0 * params.c2 * j43);
    // Volumetric pressure substitution p_vol = −κ(J−1), entering as −p_vol·F⁻ᵀ.
    p += f_inv_t * (params.kappa * (j - 1.0));
    // Fiber terms: tension-only reinforcement plus active stress.
    let w = f * a0;
    let lambda = w.norm();
    let mut dphi = params.sigma_max * gamma_bar;
    if lambda > 1.0 {
        dphi += 2.0 * params.b * (lambda - 1.0);
    }
    if dphi != 0.0 {
        p += w * a0.transpose() * (dphi / lambda);
    }
    Ok(p)
}

/// Potential density whose `F`-gradient (at frozen activation) is
/// [`pk1_stress`]: isochoric Mooney–Rivlin, tension-only fiber reinforcement,
/// the volumetric term `κ(J − ln J − 1)`, and the active potential
/// `σ_max·γ̄·λ_f`.
pub fn energy_density(
    f: &Matrix3<f64>,
    gamma_bar: f64,
    params: &MaterialParams,
    a0: &Vector3<f64>,
) -> Result<f64, MechanicsError> {
    let j = f.determinant();
    if !(j > 0.0) {
        return Err(MechanicsError::ElementInversion);
    }
    let c = f.transpose() * f;
    let i1 = c.trace();
    let i2 = 0.5 * (i1 * i1 - (c * c).trace());
    let j23 = j.powf(-2.0 / 3.0);
    let lambda = (f * a0).norm();
    let mut w = params.c1 * (j23 * i1 - 3.0) + params.c2 * (j23 * j23 * i2 - 3.0);
    w += params.kappa * (j - j.ln() - 1.0);
    if lambda > 1.0 {
        w += params.b * (lambda - 1.0) * (lambda - 1.0);
    }
    w += params.sigma_max * gamma_bar * lambda;
    Ok(w)
}

#[inline]
fn t4(i: usize, j: usize, k: usize, l: usize) -> usize {
    ((i * 3 + j) * 3 + k) * 3 + l
}

/// Analytic tangent ∂P/∂F at one Gauss point, as a flat 81-entry array with
/// layout `[(i·3+J)·3+k]·3+L`. Major-symmetric by construction.
fn tangent_at(
    f: &Matrix3<f64>,
    gamma_bar: f64,
    params: &MaterialParams,
    a0: &Vector3<f64>,
) -> Result<[f64; 81], MechanicsError> {
    let j = f.determinant();
    if !(j > 0.0) {
        return Err(MechanicsError::ElementInversion);
    }
    let f_inv = f.try_inverse().ok_or(MechanicsError::ElementInversion)?;
    let c = f.transpose() * f;
    let b_left = f * f.transpose();
    let fc = f * c;
    let i1 = c.trace();
    let i2 = 0.5 * (i1 * i1 - (c * c).trace());
    let j23 = j.powf(-2.0 / 3.0);
    let j43 = j23 * j23;

    let mut a = [0.0f64; 81];
    let two_thirds = 2.0 / 3.0;

    for i in 0..3 {
        for jj in 0..3 {
            for k in 0..3 {
                for l in 0..3 {
                    let delta_ik = (i == k) as usize as f64;
                    let delta_jl = (jj == l) as usize as f64;

                    // c1 · Ī₁ block.
                    let mut t1 = delta_ik * delta_jl;
                    t1 -= two_thirds * f_inv[(l, k)] * f[(i, jj)];
                    t1 -= two_thirds * f[(k, l)] * f_inv[(jj, i)];
                    t1 += (2.0 / 9.0) * i1 * f_inv[(l, k)] * f_inv[(jj, i)];
                    t1 += (i1 / 3.0) * f_inv[(jj, k)] * f_inv[(l, i)];

                    // c2 · Ī₂ block.
                    let p2_ij = i1 * f[(i, jj)] - fc[(i, jj)] - two_thirds * i2 * f_inv[(jj, i)];
                    let mut t2 = -(4.0 / 3.0) * f_inv[(l, k)] * p2_ij;
                    t2 += 2.0 * f[(k, l)] * f[(i, jj)];
                    t2 += i1 * delta_ik * delta_jl;
                    t2 -= delta_ik * c[(l, jj)];
                    t2 -= f[(i, l)] * f[(k, jj)];
                    t2 -= b_left[(i, k)] * delta_jl;
                    t2 -= (4.0 / 3.0) * (i1 * f[(k, l)] - fc[(k, l)]) * f_inv[(jj, i)];
                    t2 += two_thirds * i2 * f_inv[(jj, k)] * f_inv[(l, i)];

                    // Volumetric block.
                    let tv = params.kappa
                        * (j * f_inv[(jj, i)] * f_inv[(l, k)]
                            - (j - 1.0) * f_inv[(jj, k)] * f_inv[(l, i)]);

                    a[t4(i, jj, k, l)] =
                        2.0 * params.c1 * j23 * t1 + 2.0 * params.c2 * j43 * t2 + tv;
                }
            }
        }
    }

    // Fiber terms: φ(λ) with φ' = 2b(λ−1)·H(λ−1) + σ_max·γ̄, φ'' = 2b·H.
    let w = f * a0;
    let lambda = w.norm();
    let mut dphi = params.sigma_max * gamma_bar;
    let mut ddphi = 0.0;
    if lambda > 1.0 {
        dphi += 2.0 * params.b * (lambda - 1.0);
        ddphi = 2.0 * params.b;
    }
    if dphi != 0.0 || ddphi != 0.0 {
        let g1 = (ddphi - dphi / lambda) / (lambda * lambda);
        let g2 = dphi / lambda;
        for i in 0..3 {
            for jj in 0..3 {
                for k in 0..3 {
                    for l in 0..3 {
                        let mut t = g1 * w[i] * a0[jj] * w[k] * a0[l];
                        if i == k {
                            t += g2 * a0[jj] * a0[l];
                        }
                        a[t4(i, jj, k, l)] += t;
                    }
                }
            }
        }
    }
    Ok(a)
}

/// Per-gauss-point activation, element-major: entry `e·8 + q`.
pub fn uniform_gamma(mesh: &MuscleMesh, value: f64) -> Vec<f64> {
    vec![value; mesh.n_elements() * 8]
}

fn check_gamma(gamma: &[f64], mesh: &MuscleMesh) -> Result<(), MechanicsError> {
    if gamma.len() != mesh.n_elements() * 8 {
        return Err(MechanicsError::ShapeMismatch(
            "activation length != 8 × element count",
        ));
    }
    if !gamma.iter().all(|g| (0.0..=1.0).contains(g)) {
        return Err(MechanicsError::InvalidMaterial(
            "activation must lie in [0, 1]",
        ));
    }
    Ok(())
}

fn assemble_residual(
    u: &[[f64; 3]],
    gamma: &[f64],
    mesh: &MuscleMesh,
    params: &MaterialParams,
    map: &DofMap,
) -> Result<Vec<f64>, MechanicsError> {
    let a0 = Vector3::from(mesh.a0);
    let mut r = vec![0.0; map.n_free()];
    for e in 0..mesh.n_elements() {
        let nodes = mesh.element_nodes(e);
        let quad = element_quadrature(mesh, &nodes)?;
        for q in 0..8 {
            let f = gradient_at(&quad, &nodes, u, q);
            let p = pk1_stress(&f, gamma[e * 8 + q], params, &a0)?;
            let w = quad.wdet[q];
            for (a, &node) in nodes.iter().enumerate() {
                if let Some(base) = map.base[node] {
                    let g = quad.grads[q][a];
                    for i in 0..3 {
                        r[base + i] += w * (p[(i, 0)] * g[0] + p[(i, 1)] * g[1] + p[(i, 2)] * g[2]);
                    }
                }
            }
        }
    }
    Ok(r)
}

/// Internal-force vector on the free DOFs (Dirichlet rows removed).
pub fn residual(
    u: &DisplacementField,
    gamma: &[f64],
    mesh: &MuscleMesh,
    params: &MaterialParams,
) -> Result<Vec<f64>, MechanicsError> {
    mesh.validate()?;
    params.validate()?;
    u.validate(mesh)?;
    check_gamma(gamma, mesh)?;
    let map = mesh.dof_map();
    assemble_residual(&u.u, gamma, mesh, params, &map)
}

/// Consistent tangent of [`residual`] with respect to the free displacement
/// DOFs, assembled dense in row-major order. Returns `(entries, n_free)` with
/// `entries.len() == n_free * n_free`.
pub fn tangent_matrix(
    u: &DisplacementField,
    gamma: &[f64],
    mesh: &MuscleMesh,
    params: &MaterialParams,
) -> Result<(Vec<f64>, usize), MechanicsError> {
    mesh.validate()?;
    params.validate()?;
    u.validate(mesh)?;
    check_gamma(gamma, mesh)?;
    let map = mesh.dof_map();
    let tangents = ElementTangents::assemble(&u.u, gamma, mesh, params, &map)?;
    let n = tangents.n_free;
    let dense = tangents.to_dense();
    let mut entries = vec![0.0; n * n];
    for row in 0..n {
        for col in 0..n {
            entries[row * n + col] = dense[(row, col)];
        }
    }
    Ok((entries, n))
}

/// Element tangent matrices plus their free-DOF scatter, reused by both the
/// dense assembly and the matrix-free CG fallback.
struct ElementTangents {
    ke: Vec<[f64; 576]>,
    dofs: Vec<[i64; 24]>,
    n_free: usize,
}

impl ElementTangents {
    fn assemble(
        u: &[[f64; 3]],
        gamma: &[f64],
        mesh: &MuscleMesh,
        params: &MaterialParams,
        map: &DofMap,
    ) -> Result<Self, MechanicsError> {
        let a0 = Vector3::from(mesh.a0);
        let n_el = mesh.n_elements();
        let mut ke = vec![[0.0; 576]; n_el];
        let mut dofs = vec![[-1i64; 24]; n_el];
        for e in 0..n_el {
            let nodes = mesh.element_nodes(e);
            let quad = element_quadrature(mesh, &nodes)?;
            for (a, &node) in nodes.iter().enumerate() {
                if let Some(base) = map.base[node] {
                    for c in 0..3 {
                        dofs[e][a * 3 + c] = (base + c) as i64;
                    }
                }
            }
            let k = &mut ke[e];
            for q in 0..8 {
                let f = gradient_at(&quad, &nodes, u, q);
                let at = tangent_at(&f, gamma[e * 8 + q], params, &a0)?;
                let w = quad.wdet[q];
                for a in 0..8 {
                    let ga = quad.grads[q][a];
                    for b in 0..8 {
                        let gb = quad.grads[q][b];
                        for i in 0..3 {
                            for kk in 0..3 {
                                let mut acc = 0.0;
                                for jj in 0..3 {
                                    if ga[jj] == 0.0 {
                                        continue;
                                    }
                                    for l in 0..3 {
                                        acc += at[t4(i, jj, kk, l)] * ga[jj] * gb[l];
                                    }
                                }
                                k[(a * 3 + i) * 24 + (b * 3 + kk)] += w * acc;
                            }
                        }
                    }
                }
            }
        }
        Ok(Self {
            ke,
            dofs,
            n_free: map.n_free(),
        })
    }

    fn to_dense(&self) -> DMatrix<f64> {
        let n = self.n_free;
        let mut k = DMatrix::zeros(n, n);
        for (ke, dofs) in self.ke.iter().zip(self.dofs.iter()) {
            for p in 0..24 {
                let gp = dofs[p];
                if gp < 0 {
                    continue;
                }
                for qd in 0..24 {
                    let gq = dofs[qd];
                    if gq < 0 {
                        continue;
                    }
                    k[(gp as usize, gq as usize)] += ke[p * 24 + qd];
                }
            }
        }
        k
    }

    fn matvec(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        let mut xe = [0.0; 24];
        let mut ye = [0.0; 24];
        for (ke, dofs) in self.ke.iter().zip(self.dofs.iter()) {
            for p in 0..24 {
                xe[p] = if dofs[p] >= 0 { x[dofs[p] as usize] } else { 0.0 };
            }
            for (p, ye_p) in ye.iter_mut().enumerate() {
                let row = &ke[p * 24..(p + 1) * 24];
                *ye_p = row.iter().zip(xe.iter()).map(|(k, x)| k * x).sum();
            }
            for p in 0..24 {
                if dofs[p] >= 0 {
                    y[dofs[p] as usize] += ye[p];
                }
            }
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n_free];
        for (ke, dofs) in self.ke.iter().zip(self.dofs.iter()) {
            for p in 0..24 {
                if dofs[p] >= 0 {
                    d[dofs[p] as usize] += ke[p * 24 + p];
                }
            }
        }
        d
    }
}

/// Linear-solver strategy inside Newton.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TangentSolver {
    /// Dense LU up to [`DENSE_DOF_LIMIT`] free DOFs, Jacobi-CG above.
    Auto,
    Dense,
    IterativeCg,
}

/// Free-DOF count above which `Auto` switches to the iterative solver.
pub const DENSE_DOF_LIMIT: usize = 3000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NewtonOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_iterations: usize,
    pub max_line_search: usize,
    pub solver: TangentSolver,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-8,
            abs_tol: 1e-8,
            max_iterations: 50,
            max_line_search: 40,
            solver: TangentSolver::Auto,
        }
    }
}

/// Converged equilibrium plus iteration diagnostics.
#[derive(Debug, Clone)]
pub struct NewtonSolution {
    pub u: DisplacementField,
    /// Newton updates taken (0 when the start point already satisfies the
    /// tolerance).
    pub iterations: usize,
    /// Residual norms, including the initial one.
    pub residual_history: Vec<f64>,
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn solve_tangent(
    tangents: &ElementTangents,
    rhs: &[f64],
    solver: TangentSolver,
    iterations: usize,
    residual_norm: f64,
) -> Result<Vec<f64>, MechanicsError> {
    let n = tangents.n_free;
    let use_dense = match solver {
        TangentSolver::Dense => true,
        TangentSolver::IterativeCg => false,
        TangentSolver::Auto => n <= DENSE_DOF_LIMIT,
    };
    let fail = || MechanicsError::SolveFailed {
        iterations,
        residual: residual_norm,
    };
    if use_dense {
        let k = tangents.to_dense();
        let b = DVector::from_column_slice(rhs);
        let x = k.lu().solve(&b).ok_or_else(fail)?;
        return Ok(x.as_slice().to_vec());
    }
    // Jacobi-preconditioned conjugate gradients on the element tangents.
    let diag = tangents.diagonal();
    if diag.iter().any(|d| *d == 0.0) {
        return Err(fail());
    }
    let b_norm = l2(rhs);
    if b_norm == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let mut x = vec![0.0; n];
    let mut r = rhs.to_vec();
    let mut z: Vec<f64> = r.iter().zip(diag.iter()).map(|(r, d)| r / d).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(z.iter()).map(|(a, b)| a * b).sum();
    let mut ap = vec![0.0; n];
    for _ in 0..20 * n.max(100) {
        if l2(&r) <= 1e-10 * b_norm {
            return Ok(x);
        }
        tangents.matvec(&p, &mut ap);
        let p_ap: f64 = p.iter().zip(ap.iter()).map(|(a, b)| a * b).sum();
        if !(p_ap > 0.0) {
            return Err(fail());
        }
        let alpha = rz / p_ap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_new: f64 = r.iter().zip(z.iter()).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(fail())
}

/// Newton's method with backtracking line search on the residual norm.
pub fn newton_solve(
    u0: &DisplacementField,
    gamma: &[f64],
    mesh: &MuscleMesh,
    params: &MaterialParams,
    opts: &NewtonOptions,
) -> Result<NewtonSolution, MechanicsError> {
    mesh.validate()?;
    params.validate()?;
    u0.validate(mesh)?;
    check_gamma(gamma, mesh)?;
    let map = mesh.dof_map();

    let mut u = u0.u.clone();
    let mut r = assemble_residual(&u, gamma, mesh, params, &map)?;
    let mut r_norm = l2(&r);
    let tol = opts.abs_tol.max(opts.rel_tol * r_norm);
    let mut history = vec![r_norm];

    for it in 0..opts.max_iterations {
        if r_norm <= tol {
            return Ok(NewtonSolution {
                u: DisplacementField { u },
                iterations: it,
                residual_history: history,
            });
        }
        let tangents = ElementTangents::assemble(&u, gamma, mesh, params, &map)?;
        let neg_r: Vec<f64> = r.iter().map(|v| -v).collect();
        let du = solve_tangent(&tangents, &neg_r, opts.solver, it, r_norm)?;

        // Backtracking: halve until the residual norm decreases.
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_line_search {
            let mut trial = u.clone();
            for node in 0..mesh.n_nodes() {
                if let Some(base) = map.base[node] {
                    for c in 0..3 {
                        trial[node][c] += alpha * du[base + c];
                    }
                }
            }
            match assemble_residual(&trial, gamma, mesh, params, &map) {
                Ok(r_trial) => {
                    let n_trial = l2(&r_trial);
                    if n_trial.is_finite() && n_trial < r_norm {
                        accepted = Some((trial, r_trial, n_trial));
                        break;
                    }
                }
                // An inverted trial element just means the step was too big.
                Err(MechanicsError::ElementInversion) => {}
                Err(other) => return Err(other),
            }
            alpha *= 0.5;
        }
        let Some((trial, r_trial, n_trial)) = accepted else {
            return Err(MechanicsError::SolveFailed {
                iterations: it,
                residual: r_norm,
            });
        };
        u = trial;
        r = r_trial;
        r_norm = n_trial;
        history.push(r_norm);
    }

    if r_norm <= tol {
        return Ok(NewtonSolution {
            u: DisplacementField { u },
            iterations: opts.max_iterations,
            residual_history: history,
        });
    }
    Err(MechanicsError::SolveFailed {
        iterations: opts.max_iterations,
        residual: r_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const EX: [f64; 3] = [1.0, 0.0, 0.0];

    fn unit_mesh() -> MuscleMesh {
        MuscleMesh::box_grid([2, 2, 2], [1.0, 1.0, 1.0], EX).unwrap()
    }

    fn random_free_displacement(mesh: &MuscleMesh, scale: f64, seed: u64) -> DisplacementField {
        let map = mesh.dof_map();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let free: Vec<f64> = (0..map.n_free())
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        DisplacementField::from_free_vector(mesh, &map, &free)
    }

    /// Half-domain activation: elements in the low-x half at `value`, rest 0.
    fn half_gamma(mesh: &MuscleMesh, value: f64) -> Vec<f64> {
        let mut g = vec![0.0; mesh.n_elements() * 8];
        for e in 0..mesh.n_elements() {
            if mesh.element_grid_pos(e)[0] < mesh.dims[0] / 2 {
                for q in 0..8 {
                    g[e * 8 + q] = value;
                }
            }
        }
        g
    }

    #[test]
    fn box_grid_marks_the_four_fixed_faces() {
        let mesh = unit_mesh();
        assert_eq!(mesh.n_nodes(), 27);
        assert_eq!(mesh.n_elements(), 8);
        let n = mesh.n_nodes_per_axis();
        let mut free = 0;
        for iz in 0..n[2] {
            for iy in 0..n[1] {
                for ix in 0..n[0] {
                    let node = mesh.node_index(ix, iy, iz);
                    let expect_fixed = ix == 0 || ix == n[0] - 1 || iy == 0 || iz == 0;
                    assert_eq!(mesh.dirichlet[node], expect_fixed);
                    if !expect_fixed {
                        free += 1;
                    }
                }
            }
        }
        assert_eq!(free, 4);
        assert_eq!(mesh.dof_map().n_free(), 12);
    }

    #[test]
    fn deformation_gradient_reproduces_affine_maps() {
        let mesh = unit_mesh();

        let zero = DisplacementField::zeros(&mesh);
        let f = deformation_gradient(&zero, &mesh, 3, 5).unwrap();
        assert!((f - Matrix3::identity()).norm() < 1e-14);

        // Uniform stretch u = 0.1·X.
        let mut stretch = DisplacementField::zeros(&mesh);
        for (node, x) in mesh.node_coords.iter().enumerate() {
            stretch.u[node] = [0.1 * x[0], 0.1 * x[1], 0.1 * x[2]];
        }
        for e in 0..mesh.n_elements() {
            for q in 0..8 {
                let f = deformation_gradient(&stretch, &mesh, e, q).unwrap();
                assert!((f - Matrix3::identity() * 1.1).norm() < 1e-13);
            }
        }

        // Simple shear u_x = 0.2·Y.
        let mut shear = DisplacementField::zeros(&mesh);
        for (node, x) in mesh.node_coords.iter().enumerate() {
            shear.u[node] = [0.2 * x[1], 0.0, 0.0];
        }
        let mut expect = Matrix3::identity();
        expect[(0, 1)] = 0.2;
        for q in 0..8 {
            let f = deformation_gradient(&shear, &mesh, 0, q).unwrap();
            assert!((f - expect).norm() < 1e-13);
        }
    }

    #[test]
    fn inverted_elements_are_reported() {
        let mesh = unit_mesh();
        let mut u = DisplacementField::zeros(&mesh);
        for (node, x) in mesh.node_coords.iter().enumerate() {
            u.u[node] = [-2.0 * x[0], 0.0, 0.0];
        }
        assert_eq!(
            deformation_gradient(&u, &mesh, 0, 0),
            Err(MechanicsError::ElementInversion)
        );
    }

    #[test]
    fn reference_state_is_stress_free() {
        let p = MaterialParams::default();
        let f = Matrix3::identity();
        let stress = pk1_stress(&f, 0.0, &p, &Vector3::from(EX)).unwrap();
        assert!(stress.norm() < 1e-14);
    }

    #[test]
    fn full_activation_at_identity_is_pure_fiber_stress() {
        let p = MaterialParams::default();
        let stress = pk1_stress(&Matrix3::identity(), 1.0, &p, &Vector3::from(EX)).unwrap();
        let mut expect = Matrix3::zeros();
        expect[(0, 0)] = p.sigma_max;
        assert!((stress - expect).norm() < 1e-12);
    }

    fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        let axis = nalgebra::Unit::new_normalize(Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ));
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        *nalgebra::Rotation3::from_axis_angle(&axis, angle).matrix()
    }

    #[test]
    fn stress_is_rotationally_equivariant_and_energy_objective() {
        let p = MaterialParams::default();
        let a0 = Vector3::from(EX);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut f = Matrix3::identity();
        for i in 0..3 {
            for j in 0..3 {
                f[(i, j)] += rng.random_range(-0.08..0.08);
            }
        }
        assert!(f.determinant() > 0.0);
        let stress = pk1_stress(&f, 0.6, &p, &a0).unwrap();
        let energy = energy_density(&f, 0.6, &p, &a0).unwrap();
        for _ in 0..10 {
            let q = random_rotation(&mut rng);
            let qf = q * f;
            let rotated = pk1_stress(&qf, 0.6, &p, &a0).unwrap();
            assert!((rotated - q * stress).norm() < 1e-10 * stress.norm());
            let w = energy_density(&qf, 0.6, &p, &a0).unwrap();
            assert!((w - energy).abs() < 1e-10 * energy.abs().max(1.0));
        }
    }

    #[test]
    fn reference_residual_vanishes_and_activation_pulls_along_the_fiber() {
        let mesh = MuscleMesh::box_grid([4, 2, 2], [1.0, 1.0, 1.0], EX).unwrap();
        let p = MaterialParams::default();
        let u = DisplacementField::zeros(&mesh);

        let r0 = residual(&u, &uniform_gamma(&mesh, 0.0), &mesh, &p).unwrap();
        assert!(r0.iter().all(|x| x.abs() < 1e-12));

        // Uniform activation with fibers parallel to the free faces keeps the
        // reference state in equilibrium: constant active stress is
        // divergence-free and exerts no traction on faces whose normals are
        // orthogonal to a0.
        let r_uniform = residual(&u, &uniform_gamma(&mesh, 0.5), &mesh, &p).unwrap();
        assert!(r_uniform.iter().all(|x| x.abs() < 1e-12));

        // Activating only half the domain breaks equilibrium along the fiber
        // axis; transverse components stay zero at the reference state.
        let r_half = residual(&u, &half_gamma(&mesh, 0.5), &mesh, &p).unwrap();
        let map = mesh.dof_map();
        let mut max_x: f64 = 0.0;
        let mut max_yz: f64 = 0.0;
        for node in 0..mesh.n_nodes() {
            if let Some(base) = map.dof(node, 0) {
                max_x = max_x.max(r_half[base].abs());
                max_yz = max_yz.max(r_half[base + 1].abs()).max(r_half[base + 2].abs());
            }
        }
        assert!(max_x > 1e-2, "activation jump should pull along x, got {max_x}");
        assert!(max_yz < 1e-12, "transverse pull should vanish, got {max_yz}");
    }

    /// Central finite differences of the free-DOF residual.
    fn fd_tangent(
        u: &DisplacementField,
        gamma: &[f64],
        mesh: &MuscleMesh,
        p: &MaterialParams,
    ) -> DMatrix<f64> {
        let map = mesh.dof_map();
        let n = map.n_free();
        let base = u.to_free_vector(mesh, &map);
        let eps = 1e-6;
        let mut k = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut plus = base.clone();
            plus[j] += eps;
            let mut minus = base.clone();
            minus[j] -= eps;
            let rp = residual(
                &DisplacementField::from_free_vector(mesh, &map, &plus),
                gamma,
                mesh,
                p,
            )
            .unwrap();
            let rm = residual(
                &DisplacementField::from_free_vector(mesh, &map, &minus),
                gamma,
                mesh,
                p,
            )
            .unwrap();
            for i in 0..n {
                k[(i, j)] = (rp[i] - rm[i]) / (2.0 * eps);
            }
        }
        k
    }

    fn analytic_tangent(
        u: &DisplacementField,
        gamma: &[f64],
        mesh: &MuscleMesh,
        p: &MaterialParams,
    ) -> DMatrix<f64> {
        let (entries, n) = tangent_matrix(u, gamma, mesh, p).unwrap();
        DMatrix::from_fn(n, n, |i, j| entries[i * n + j])
    }

    fn check_tangent_branch(p: MaterialParams, gamma_value: f64, seed: u64) {
        let mesh = unit_mesh();
        let mut u = random_free_displacement(&mesh, 0.01, seed);
        // Bias the x-displacement so the fiber term sees both λ>1 and λ<1
        // away from the kink.
        let map = mesh.dof_map();
        for node in 0..mesh.n_nodes() {
            if map.dof(node, 0).is_some() {
                u.u[node][0] += 0.03;
            }
        }
        let gamma = uniform_gamma(&mesh, gamma_value);
        let ka = analytic_tangent(&u, &gamma, &mesh, &p);
        let kfd = fd_tangent(&u, &gamma, &mesh, &p);
        let rel = (&ka - &kfd).norm() / kfd.norm();
        assert!(rel < 1e-5, "tangent mismatch {rel} for {p:?}");
        // Variational structure: the tangent is symmetric.
        let asym = (&ka - ka.transpose()).norm() / ka.norm();
        assert!(asym < 1e-10, "asymmetry {asym} for {p:?}");
    }

    #[test]
    fn tangent_matches_finite_differences_isotropic_branch() {
        check_tangent_branch(
            MaterialParams {
                c1: 3.56,
                c2: 3.86,
                b: 0.0,
                kappa: 0.0,
                sigma_max: 0.0,
            },
            0.0,
            1,
        );
    }

    #[test]
    fn tangent_matches_finite_differences_fiber_branch() {
        check_tangent_branch(
            MaterialParams {
                c1: 0.0,
                c2: 0.0,
                b: 30.0,
                kappa: 0.0,
                sigma_max: 0.0,
            },
            0.0,
            2,
        );
    }

    #[test]
    fn tangent_matches_finite_differences_active_branch() {
        check_tangent_branch(
            MaterialParams {
                c1: 0.0,
                c2: 0.0,
                b: 0.0,
                kappa: 0.0,
                sigma_max: 30.0,
            },
            0.7,
            3,
        );
    }

    #[test]
    fn tangent_matches_finite_differences_penalty_branch() {
        check_tangent_branch(
            MaterialParams {
                c1: 0.0,
                c2: 0.0,
                b: 0.0,
                kappa: 1000.0,
                sigma_max: 0.0,
            },
            0.0,
            4,
        );
    }

    #[test]
    fn tangent_matches_finite_differences_all_branches() {
        check_tangent_branch(MaterialParams::default(), 0.5, 5);
    }

    #[test]
    fn newton_accepts_the_reference_state_without_activation() {
        let mesh = unit_mesh();
        let sol = newton_solve(
            &DisplacementField::zeros(&mesh),
            &uniform_gamma(&mesh, 0.0),
            &mesh,
            &MaterialParams::default(),
            &NewtonOptions::default(),
        )
        .unwrap();
        assert_eq!(sol.iterations, 0);
        assert_eq!(sol.u.max_abs(), 0.0);
    }

    #[test]
    fn uniform_activation_keeps_the_constrained_cube_at_rest() {
        let mesh = unit_mesh();
        let sol = newton_solve(
            &DisplacementField::zeros(&mesh),
            &uniform_gamma(&mesh, 0.5),
            &mesh,
            &MaterialParams::default(),
            &NewtonOptions::default(),
        )
        .unwrap();
        // With both x-faces pinned and fibers orthogonal to the free-face
        // normals, uniform activation leaves u = 0 in equilibrium.
        assert!(sol.u.max_abs() < 1e-10);
    }

    #[test]
    fn localized_activation_shortens_the_active_half() {
        let mesh = MuscleMesh::box_grid([4, 2, 2], [1.0, 1.0, 1.0], EX).unwrap();
        let p = MaterialParams::default();
        let gamma = half_gamma(&mesh, 0.5);
        let sol = newton_solve(
            &DisplacementField::zeros(&mesh),
            &gamma,
            &mesh,
            &p,
            &NewtonOptions::default(),
        )
        .unwrap();

        // Residual tolerance was met.
        let r = residual(&sol.u, &gamma, &mesh, &p).unwrap();
        let r0 = sol.residual_history[0];
        assert!(l2(&r) <= (1e-8f64).max(1e-8 * r0));
        assert!(sol.u.max_abs() > 1e-4, "activation should deform the mesh");

        // Fiber stretch: active half shortens, passive half stretches.
        let mut active_strain: f64 = 0.0;
        let mut passive_strain: f64 = 0.0;
        let a0 = Vector3::from(EX);
        let mut n_active = 0;
        let mut n_passive = 0;
        for e in 0..mesh.n_elements() {
            for q in 0..8 {
                let f = deformation_gradient(&sol.u, &mesh, e, q).unwrap();
                let strain = (f * a0).norm() - 1.0;
                if gamma[e * 8] > 0.0 {
                    active_strain += strain;
                    n_active += 1;
                } else {
                    passive_strain += strain;
                    n_passive += 1;
                }
            }
        }
        active_strain /= n_active as f64;
        passive_strain /= n_passive as f64;
        assert!(
            active_strain < -1e-4,
            "active half should shorten, mean fiber strain {active_strain}"
        );
        assert!(
            passive_strain > 1e-4,
            "passive half should stretch, mean fiber strain {passive_strain}"
        );

        // Near-incompressibility: |J − 1| stays below 10·c1/κ everywhere.
        let bound = 10.0 * p.c1 / p.kappa;
        for e in 0..mesh.n_elements() {
            for q in 0..8 {
                let f = deformation_gradient(&sol.u, &mesh, e, q).unwrap();
                assert!((f.determinant() - 1.0).abs() < bound);
            }
        }

        // Once inside the basin, the residual contracts superlinearly.
        let h = &sol.residual_history;
        assert!(h.len() >= 3, "history {h:?}");
        let r_last = h[h.len() - 1] / r0;
        let r_prev = h[h.len() - 2] / r0;
        assert!(
            r_last < r_prev * r_prev.sqrt(),
            "expected superlinear contraction, history {h:?}"
        );
    }

    #[test]
    fn dense_and_iterative_tangent_solvers_agree() {
        let mesh = MuscleMesh::box_grid([4, 2, 2], [1.0, 1.0, 1.0], EX).unwrap();
        let p = MaterialParams::default();
        let gamma = half_gamma(&mesh, 0.5);
        let dense = newton_solve(
            &DisplacementField::zeros(&mesh),
            &gamma,
            &mesh,
            &p,
            &NewtonOptions {
                solver: TangentSolver::Dense,
                ..NewtonOptions::default()
            },
        )
        .unwrap();
        let iterative = newton_solve(
            &DisplacementField::zeros(&mesh),
            &gamma,
            &mesh,
            &p,
            &NewtonOptions {
                solver: TangentSolver::IterativeCg,
                ..NewtonOptions::default()
            },
        )
        .unwrap();
        let diff: f64 = dense
            .u
            .u
            .iter()
            .zip(iterative.u.u.iter())
            .flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]).abs()))
            .fold(0.0, f64::max);
        assert!(diff < 1e-7, "solver paths disagree by {diff}");
    }

    #[test]
    fn stress_is_the_energy_gradient() {
        let p = MaterialParams::default();
        let a0 = Vector3::from(EX);
        // One state with the fiber in tension, one in compression, both away
        // from the reinforcement kink at λ = 1.
        for (seed, stretch) in [(7u64, 0.05), (8, -0.05)] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut f = Matrix3::identity() * (1.0 + stretch);
            for i in 0..3 {
                for j in 0..3 {
                    f[(i, j)] += rng.random_range(-0.02..0.02);
                }
            }
            let stress = pk1_stress(&f, 0.4, &p, &a0).unwrap();
            let eps = 1e-7;
            let scale = stress.norm().max(1.0);
            for i in 0..3 {
                for j in 0..3 {
                    let mut fp = f;
                    fp[(i, j)] += eps;
                    let mut fm = f;
                    fm[(i, j)] -= eps;
                    let wp = energy_density(&fp, 0.4, &p, &a0).unwrap();
                    let wm = energy_density(&fm, 0.4, &p, &a0).unwrap();
                    let fd = (wp - wm) / (2.0 * eps);
                    assert!(
                        (fd - stress[(i, j)]).abs() < 1e-5 * scale,
                        "component ({i},{j}): fd {fd} vs analytic {}",
                        stress[(i, j)]
                    );
                }
            }
        }
    }

    #[test]
    fn impossible_problems_report_solve_failure() {
        // A pure active material with no stiffness cannot equilibrate a
        // half-activated domain: the tangent is singular.
        let mesh = unit_mesh();
        let p = MaterialParams {
            c1: 0.0,
            c2: 0.0,
            b: 0.0,
            kappa: 0.0,
            sigma_max: 30.0,
        };
        let err = newton_solve(
            &DisplacementField::zeros(&mesh),
            &half_gamma(&mesh, 0.8),
            &mesh,
            &p,
            &NewtonOptions::default(),
        )
        .unwrap_err();
        assert_eq!(err.to_string(), "mechanics solve failed");
    }

    #[test]
    fn material_validation_rejects_negative_constants() {
        let mut p = MaterialParams::default();
        p.kappa = -1.0;
        assert!(p.validate().is_err());
        assert!(MaterialParams::default().validate().is_ok());
    }
}
