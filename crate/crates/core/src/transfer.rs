//! Exchange between embedded 1D fibers and the 3D mechanics mesh.
//!
//! Fibers run along the x-axis of the box mesh on a regular (y, z) grid of
//! cell-centered offsets. Because both grids are regular, the owning element
//! of every fiber node follows from integer index arithmetic — construction
//! is linear in the fiber-node count, with no geometric search. A naive
//! scan-all-elements construction lives in [`reference`] and is used only as
//! a test oracle.
//!
//! Data flows both ways each coupling step: nodal displacements interpolate
//! to fiber-node positions (trilinear, via the owning element), deformed
//! positions turn into half-sarcomere lengths by finite differences, and
//! per-node activation homogenizes to a per-element mean broadcast to the
//! element's Gauss points.

use crate::mechanics::{shape_values, DisplacementField, MuscleMesh};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TransferError {
    #[error("fiber node outside mesh bounding box")]
    OutsideMesh,
    #[error("degenerate fiber segment")]
    DegenerateSegment,
    #[error("invalid fiber layout: {0}")]
    InvalidLayout(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(&'static str),
}

/// Regular grid of fibers spanning the mesh in x.
///
/// Fiber `(fy, fz)` sits at the center of bin `fy` of `fibers_y` equal bins
/// in y (likewise in z); its `nodes_per_fiber` nodes are spaced uniformly
/// from one x-face to the other. Fiber ids are y-fastest; fiber-node ids are
/// `fiber · nodes_per_fiber + node`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FiberLayout {
    pub fibers_y: usize,
    pub fibers_z: usize,
    pub nodes_per_fiber: usize,
}

impl FiberLayout {
    pub fn new(fibers_y: usize, fibers_z: usize, nodes_per_fiber: usize) -> Self {
        Self {
            fibers_y,
            fibers_z,
            nodes_per_fiber,
        }
    }

    /// `per_dir × per_dir` fibers in every element cross-section.
    pub fn per_element(mesh: &MuscleMesh, per_dir: usize, nodes_per_fiber: usize) -> Self {
        Self {
            fibers_y: per_dir * mesh.dims[1],
            fibers_z: per_dir * mesh.dims[2],
            nodes_per_fiber,
        }
    }

    pub fn validate(&self) -> Result<(), TransferError> {
        if self.fibers_y == 0 || self.fibers_z == 0 {
            return Err(TransferError::InvalidLayout(
                "need at least one fiber per direction",
            ));
        }
        if self.nodes_per_fiber < 2 {
            return Err(TransferError::InvalidLayout(
                "need at least two nodes per fiber",
            ));
        }
        Ok(())
    }

    pub fn n_fibers(&self) -> usize {
        self.fibers_y * self.fibers_z
    }

    pub fn n_nodes(&self) -> usize {
        self.n_fibers() * self.nodes_per_fiber
    }

    #[inline]
    pub fn fiber_index(&self, fy: usize, fz: usize) -> usize {
        fy + self.fibers_y * fz
    }

    #[inline]
    pub fn node_id(&self, fiber: usize, node: usize) -> usize {
        fiber * self.nodes_per_fiber + node
    }

    /// Reference x-spacing between consecutive fiber nodes.
    pub fn node_spacing(&self, mesh: &MuscleMesh) -> f64 {
        let (lo, hi) = mesh.bounding_box();
        (hi[0] - lo[0]) / (self.nodes_per_fiber - 1) as f64
    }

    /// Reference position of one fiber node.
    pub fn node_position(&self, mesh: &MuscleMesh, fiber: usize, node: usize) -> [f64; 3] {
        let (lo, hi) = mesh.bounding_box();
        let fy = fiber % self.fibers_y;
        let fz = fiber / self.fibers_y;
        [
            lo[0] + node as f64 * (hi[0] - lo[0]) / (self.nodes_per_fiber - 1) as f64,
            lo[1] + (fy as f64 + 0.5) * (hi[1] - lo[1]) / self.fibers_y as f64,
            lo[2] + (fz as f64 + 0.5) * (hi[2] - lo[2]) / self.fibers_z as f64,
        ]
    }
}

/// Where every fiber node lives inside the 3D mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMap {
    /// Owning 3D element per fiber node.
    pub node_element: Vec<usize>,
    /// Local coordinates ξ ∈ [−1, 1]³ inside the owning element.
    pub node_xi: Vec<[f64; 3]>,
    /// Fiber-node ids contained in each 3D element, ascending.
    pub element_fiber_nodes: Vec<Vec<usize>>,
    /// Fibers per element per transverse direction when the fiber grid
    /// divides the element grid evenly; 0 in a direction where it does not.
    pub fibers_per_element: [usize; 2],
}

impl EmbeddingMap {
    pub fn n_fiber_nodes(&self) -> usize {
        self.node_element.len()
    }
}

/// Reject positions outside the box (with a tiny relative tolerance), clamp
/// boundary round-off into it.
fn clamp_into_box(p: [f64; 3], lo: &[f64; 3], hi: &[f64; 3]) -> Result<[f64; 3], TransferError> {
    let mut out = p;
    for d in 0..3 {
        let tol = 1e-9 * (hi[d] - lo[d]).max(1.0);
        if p[d] < lo[d] - tol || p[d] > hi[d] + tol {
            return Err(TransferError::OutsideMesh);
        }
        out[d] = p[d].clamp(lo[d], hi[d]);
    }
    Ok(out)
}

/// Cell index along one axis; points exactly on a shared face go to the
/// lower cell.
#[inline]
fn cell_of(offset: f64, h: f64, n_cells: usize) -> usize {
    let t = offset / h;
    (t.ceil() as isize - 1).clamp(0, n_cells as isize - 1) as usize
}

fn local_coords(mesh: &MuscleMesh, element: usize, p: &[f64; 3]) -> [f64; 3] {
    let nodes = mesh.element_nodes(element);
    let c0 = mesh.node_coords[nodes[0]];
    let c7 = mesh.node_coords[nodes[7]];
    let mut xi = [0.0; 3];
    for d in 0..3 {
        xi[d] = (2.0 * (p[d] - c0[d]) / (c7[d] - c0[d]) - 1.0).clamp(-1.0, 1.0);
    }
    xi
}

/// Owning element and local coordinates of an arbitrary point, by integer
/// index arithmetic. Ties on shared faces go to the lower element index.
pub fn locate_node(
    mesh: &MuscleMesh,
    position: [f64; 3],
) -> Result<(usize, [f64; 3]), TransferError> {
    let (lo, hi) = mesh.bounding_box();
    let p = clamp_into_box(position, &lo, &hi)?;
    let mut idx = [0usize; 3];
    for d in 0..3 {
        let h = (hi[d] - lo[d]) / mesh.dims[d] as f64;
        idx[d] = cell_of(p[d] - lo[d], h, mesh.dims[d]);
    }
    let element = mesh.element_index(idx[0], idx[1], idx[2]);
    Ok((element, local_coords(mesh, element, &p)))
}

fn fibers_per_element(mesh: &MuscleMesh, layout: &FiberLayout) -> [usize; 2] {
    let fy = if layout.fibers_y % mesh.dims[1] == 0 {
        layout.fibers_y / mesh.dims[1]
    } else {
        0
    };
    let fz = if layout.fibers_z % mesh.dims[2] == 0 {
        layout.fibers_z / mesh.dims[2]
    } else {
        0
    };
    [fy, fz]
}

/// Indexed embedding construction, linear in the fiber-node count.
pub fn build_embedding(
    mesh: &MuscleMesh,
    layout: &FiberLayout,
) -> Result<EmbeddingMap, TransferError> {
    layout.validate()?;
    let n = layout.n_nodes();
    let mut node_element = Vec::with_capacity(n);
    let mut node_xi = Vec::with_capacity(n);
    let mut element_fiber_nodes = vec![Vec::new(); mesh.n_elements()];
    for fiber in 0..layout.n_fibers() {
        for node in 0..layout.nodes_per_fiber {
            let p = layout.node_position(mesh, fiber, node);
            let (element, xi) = locate_node(mesh, p)?;
            let id = layout.node_id(fiber, node);
            node_element.push(element);
            node_xi.push(xi);
            element_fiber_nodes[element].push(id);
        }
    }
    Ok(EmbeddingMap {
        node_element,
        node_xi,
        element_fiber_nodes,
        fibers_per_element: fibers_per_element(mesh, layout),
    })
}

/// Deformed positions of all fiber nodes: trilinear interpolation of
/// `X + u` over each node's owning element.
pub fn interpolate_positions(
    u: &DisplacementField,
    map: &EmbeddingMap,
    mesh: &MuscleMesh,
) -> Result<Vec<[f64; 3]>, TransferError> {
    if u.u.len() != mesh.n_nodes() {
        return Err(TransferError::ShapeMismatch("field length != node count"));
    }
    if map.element_fiber_nodes.len() != mesh.n_elements() {
        return Err(TransferError::ShapeMismatch("map built for a different mesh"));
    }
    let mut out = Vec::with_capacity(map.n_fiber_nodes());
    for (element, xi) in map.node_element.iter().zip(map.node_xi.iter()) {
        let weights = shape_values(xi);
        let corners = mesh.element_nodes(*element);
        let mut p = [0.0; 3];
        for (a, &corner) in corners.iter().enumerate() {
            let x = mesh.node_coords[corner];
            let du = u.u[corner];
            for d in 0..3 {
                p[d] += weights[a] * (x[d] + du[d]);
            }
        }
        out.push(p);
    }
    Ok(out)
}

/// Half-sarcomere length per fiber node, µm: the resting length scaled by
/// the local stretch from central differences of the deformed positions
/// (one-sided at fiber ends) over the reference spacing.
pub fn half_sarcomere_lengths(
    positions: &[[f64; 3]],
    nodes_per_fiber: usize,
    reference_spacing: f64,
    l_opt_ref: f64,
) -> Result<Vec<f64>, TransferError> {
    if nodes_per_fiber < 2 {
        return Err(TransferError::InvalidLayout(
            "need at least two nodes per fiber",
        ));
    }
    if positions.len() % nodes_per_fiber != 0 {
        return Err(TransferError::ShapeMismatch(
            "position count not a multiple of nodes per fiber",
        ));
    }
    if !(reference_spacing > 0.0) || !(l_opt_ref > 0.0) {
        return Err(TransferError::InvalidLayout(
            "reference spacing and resting length must be positive",
        ));
    }
    let dist = |a: &[f64; 3], b: &[f64; 3]| -> f64 {
        let dx = a[0] - b[0];
        let dy = a[1] - b[1];
        let dz = a[2] - b[2];
        (dx * dx + dy * dy + dz * dz).sqrt()
    };
    let mut out = Vec::with_capacity(positions.len());
    for fiber in positions.chunks_exact(nodes_per_fiber) {
        for j in 0..nodes_per_fiber {
            let stretch = if j == 0 {
                dist(&fiber[1], &fiber[0]) / reference_spacing
            } else if j == nodes_per_fiber - 1 {
                dist(&fiber[j], &fiber[j - 1]) / reference_spacing
            } else {
                dist(&fiber[j + 1], &fiber[j - 1]) / (2.0 * reference_spacing)
            };
            if !(stretch > 0.0) || !stretch.is_finite() {
                return Err(TransferError::DegenerateSegment);
            }
            out.push(l_opt_ref * stretch);
        }
    }
    Ok(out)
}

/// Per-element mean of the contained fiber nodes' activation, broadcast to
/// the element's 8 Gauss slots. Elements without fibers stay passive (0).
pub fn homogenize_gamma(
    gamma: &[f64],
    map: &EmbeddingMap,
    mesh: &MuscleMesh,
) -> Result<Vec<f64>, TransferError> {
    if gamma.len() != map.n_fiber_nodes() {
        return Err(TransferError::ShapeMismatch(
            "activation length != fiber node count",
        ));
    }
    if map.element_fiber_nodes.len() != mesh.n_elements() {
        return Err(TransferError::ShapeMismatch("map built for a different mesh"));
    }
    let mut out = vec![0.0; mesh.n_elements() * 8];
    for (e, contained) in map.element_fiber_nodes.iter().enumerate() {
        if contained.is_empty() {
            continue;
        }
        let mean = contained.iter().map(|&id| gamma[id]).sum::<f64>() / contained.len() as f64;
        out[e * 8..(e + 1) * 8].fill(mean);
    }
    Ok(out)
}

/// Naive geometric constructions, quadratic in problem size; test oracles
/// for the indexed paths.
pub mod reference {
    use super::*;

    /// Scan every element for every fiber node; first containing element
    /// wins, which reproduces the lower-index tie-break. Returns the map and
    /// the number of containment tests performed.
    pub fn build_embedding(
        mesh: &MuscleMesh,
        layout: &FiberLayout,
    ) -> Result<(EmbeddingMap, u64), TransferError> {
        layout.validate()?;
        let (lo, hi) = mesh.bounding_box();
        let n = layout.n_nodes();
        let mut node_element = Vec::with_capacity(n);
        let mut node_xi = Vec::with_capacity(n);
        let mut element_fiber_nodes = vec![Vec::new(); mesh.n_elements()];
        let mut ops = 0u64;
        for fiber in 0..layout.n_fibers() {
            for node in 0..layout.nodes_per_fiber {
                let p = clamp_into_box(layout.node_position(mesh, fiber, node), &lo, &hi)?;
                let mut found = None;
                for e in 0..mesh.n_elements() {
                    ops += 1;
                    let corners = mesh.element_nodes(e);
                    let c0 = mesh.node_coords[corners[0]];
                    let c7 = mesh.node_coords[corners[7]];
                    if (0..3).all(|d| p[d] >= c0[d] && p[d] <= c7[d]) {
                        found = Some(e);
                        break;
                    }
                }
                let element = found.ok_or(TransferError::OutsideMesh)?;
                let id = layout.node_id(fiber, node);
                node_element.push(element);
                node_xi.push(local_coords(mesh, element, &p));
                element_fiber_nodes[element].push(id);
            }
        }
        Ok((
            EmbeddingMap {
                node_element,
                node_xi,
                element_fiber_nodes,
                fibers_per_element: fibers_per_element(mesh, layout),
            },
            ops,
        ))
    }

    /// Homogenization through the naive embedding; returns γ̄ and the
    /// containment-test count.
    pub fn homogenize_gamma(
        gamma: &[f64],
        mesh: &MuscleMesh,
        layout: &FiberLayout,
    ) -> Result<(Vec<f64>, u64), TransferError> {
        let (map, ops) = build_embedding(mesh, layout)?;
        Ok((super::homogenize_gamma(gamma, &map, mesh)?, ops))
    }
}
