//! Cuboid domain-decomposition planning.
//!
//! The element grid is split into a `p_x × p_y × p_z` grid of box-shaped
//! partitions. Remainders along an axis go to the highest-index partitions,
//! so boundary partitions may hold one extra element layer. Two planning
//! strategies exist: `pillar` keeps every fiber whole (`p_x = 1`, each
//! partition spans the full x-extent, so no 1D communication is ever
//! needed), `cubic` minimizes the total internal interface area. The
//! optimizer additionally trades a few unused processes against better
//! partition shapes for process counts without good factorizations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PartitionError {
    #[error("infeasible layout")]
    Infeasible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// `p_x = 1`: partitions span the whole fiber direction.
    Pillar,
    /// Minimize total internal interface area.
    Cubic,
    /// Hand-specified subdivisions.
    General,
}

/// A box decomposition of the element grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionLayout {
    /// Domain size in elements.
    pub domain: [usize; 3],
    /// Partitions per axis.
    pub subdivisions: [usize; 3],
    /// Per-axis split points; axis `d` has `subdivisions[d] + 1` entries
    /// running from 0 to `domain[d]`.
    pub splits: [Vec<usize>; 3],
    pub strategy: Strategy,
}

/// Even split of `extent` into `parts`, remainders to the highest-index
/// partitions.
fn axis_splits(extent: usize, parts: usize) -> Vec<usize> {
    let base = extent / parts;
    let remainder = extent % parts;
    let mut splits = Vec::with_capacity(parts + 1);
    let mut at = 0;
    splits.push(0);
    for i in 0..parts {
        at += base + usize::from(i >= parts - remainder);
        splits.push(at);
    }
    splits
}

impl PartitionLayout {
    /// Layout with explicit subdivisions; ragged boundary partitions get the
    /// remainder elements.
    pub fn from_subdivisions(
        domain: [usize; 3],
        subdivisions: [usize; 3],
        strategy: Strategy,
    ) -> Result<Self, PartitionError> {
        for d in 0..3 {
            if subdivisions[d] == 0 || subdivisions[d] > domain[d] {
                return Err(PartitionError::Infeasible);
            }
        }
        if strategy == Strategy::Pillar && subdivisions[0] != 1 {
            return Err(PartitionError::Infeasible);
        }
        let splits = [
            axis_splits(domain[0], subdivisions[0]),
            axis_splits(domain[1], subdivisions[1]),
            axis_splits(domain[2], subdivisions[2]),
        ];
        Ok(Self {
            domain,
            subdivisions,
            splits,
            strategy,
        })
    }

    pub fn n_partitions(&self) -> usize {
        self.subdivisions.iter().product()
    }

    #[inline]
    pub fn rank_of(&self, px: usize, py: usize, pz: usize) -> usize {
        px + self.subdivisions[0] * (py + self.subdivisions[1] * pz)
    }

    #[inline]
    pub fn grid_pos(&self, rank: usize) -> [usize; 3] {
        let px = rank % self.subdivisions[0];
        let rest = rank / self.subdivisions[0];
        [px, rest % self.subdivisions[1], rest / self.subdivisions[1]]
    }

    /// Element extent of one partition along one axis: `[start, end)`.
    #[inline]
    pub fn axis_range(&self, axis: usize, index: usize) -> [usize; 2] {
        [self.splits[axis][index], self.splits[axis][index + 1]]
    }

    /// Element box `[start, end)` per axis of one partition.
    pub fn partition_box(&self, rank: usize) -> [[usize; 2]; 3] {
        let pos = self.grid_pos(rank);
        [
            self.axis_range(0, pos[0]),
            self.axis_range(1, pos[1]),
            self.axis_range(2, pos[2]),
        ]
    }

    /// All partition boxes, rank order.
    pub fn partition_ranges(&self) -> Vec<[[usize; 2]; 3]> {
        (0..self.n_partitions()).map(|r| self.partition_box(r)).collect()
    }

    /// Element counts per axis of one partition.
    pub fn partition_shape(&self, rank: usize) -> [usize; 3] {
        let b = self.partition_box(rank);
        [b[0][1] - b[0][0], b[1][1] - b[1][0], b[2][1] - b[2][0]]
    }

    /// Owning partition of an element.
    pub fn owner_of(&self, element: [usize; 3]) -> usize {
        let mut pos = [0usize; 3];
        for d in 0..3 {
            // splits are sorted; find the cell containing the element index.
            pos[d] = match self.splits[d].binary_search(&element[d]) {
                Ok(i) => i.min(self.subdivisions[d] - 1),
                Err(i) => i - 1,
            };
        }
        self.rank_of(pos[0], pos[1], pos[2])
    }

    pub fn validate(&self) -> Result<(), PartitionError> {
        for d in 0..3 {
            let s = &self.splits[d];
            if s.len() != self.subdivisions[d] + 1
                || s.first() != Some(&0)
                || s.last() != Some(&self.domain[d])
                || s.windows(2).any(|w| w[0] >= w[1])
            {
                return Err(PartitionError::Infeasible);
            }
        }
        if self.strategy == Strategy::Pillar && self.subdivisions[0] != 1 {
            return Err(PartitionError::Infeasible);
        }
        Ok(())
    }
}

/// Total internal interface area of a grid decomposition, in unit element
/// faces: every internal cut is a full plane of the domain cross-section.
fn interface_area(domain: [usize; 3], p: [usize; 3]) -> usize {
    (p[0] - 1) * domain[1] * domain[2]
        + (p[1] - 1) * domain[0] * domain[2]
        + (p[2] - 1) * domain[0] * domain[1]
}

fn admissible(p: [usize; 3], domain: [usize; 3], strategy: Strategy) -> bool {
    if strategy == Strategy::Pillar && p[0] != 1 {
        return false;
    }
    (0..3).all(|d| p[d] >= 1 && p[d] <= domain[d])
}

/// Ordered factorizations `p_x·p_y·p_z = processes` admissible on the
/// domain under the strategy.
fn factorizations(
    processes: usize,
    domain: [usize; 3],
    strategy: Strategy,
) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for px in 1..=processes {
        if processes % px != 0 {
            continue;
        }
        let rest = processes / px;
        for py in 1..=rest {
            if rest % py != 0 {
                continue;
            }
            let p = [px, py, rest / py];
            if admissible(p, domain, strategy) {
                out.push(p);
            }
        }
    }
    out
}

/// Best admissible factorization: minimal total interface area, ties broken
/// toward the lexicographically greatest `(p_x, p_y, p_z)` (most
/// subdivisions along the fiber axis first).
pub fn factorize(
    processes: usize,
    domain: [usize; 3],
    strategy: Strategy,
) -> Result<PartitionLayout, PartitionError> {
    if processes == 0 {
        return Err(PartitionError::Infeasible);
    }
    let mut best: Option<([usize; 3], usize)> = None;
    for p in factorizations(processes, domain, strategy) {
        let area = interface_area(domain, p);
        let better = match &best {
            None => true,
            Some((bp, ba)) => area < *ba || (area == *ba && p > *bp),
        };
        if better {
            best = Some((p, area));
        }
    }
    let (p, _) = best.ok_or(PartitionError::Infeasible)?;
    PartitionLayout::from_subdivisions(domain, p, strategy)
}

/// Default penalty per unused process in [`optimize_layout`].
pub const DEFAULT_UNUSED_WEIGHT: f64 = 1000.0;

/// Best layout over all process counts `P'` with `0.9·P ≤ P' ≤ P`, scored by
/// `interface area + unused_weight·(P − P')`. Falls back to a single
/// partition when nothing in the range is admissible.
pub fn optimize_layout(
    processes: usize,
    domain: [usize; 3],
    strategy: Strategy,
    unused_weight: f64,
) -> PartitionLayout {
    let floor = ((0.9 * processes as f64).ceil() as usize).max(1);
    let mut best: Option<([usize; 3], usize, f64)> = None;
    for used in floor..=processes.max(1) {
        let unused = processes.saturating_sub(used);
        for p in factorizations(used, domain, strategy) {
            let area = interface_area(domain, p) as f64;
            // Guard: with unused = 0 the score is the area even for an
            // infinite weight (∞·0 would poison the comparison).
            let score = if unused == 0 {
                area
            } else {
                area + unused_weight * unused as f64
            };
            let better = match &best {
                None => true,
                Some((bp, bused, bscore)) => {
                    score < *bscore
                        || (score == *bscore && (used > *bused || (used == *bused && p > *bp)))
                }
            };
            if better {
                best = Some((p, used, score));
            }
        }
    }
    match best {
        Some((p, _, _)) => PartitionLayout::from_subdivisions(domain, p, strategy)
            .expect("admissible factorization"),
        None => {
            let tag = strategy;
            PartitionLayout::from_subdivisions(domain, [1, 1, 1], tag)
                .expect("single partition is always admissible")
        }
    }
}

/// Communication structure of a layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommModel {
    /// Per partition: ranks touching it by face, edge, or corner (≤ 26).
    pub neighbors: Vec<Vec<usize>>,
    /// Per partition: `(face-adjacent rank, shared face area)`, symmetric.
    pub face_areas: Vec<Vec<(usize, usize)>>,
    /// Per partition: exterior elements one face-layer deep.
    pub ghost_elements: Vec<usize>,
    /// Internal fiber cut planes (`p_x − 1`); each plane cuts every fiber
    /// once.
    pub fiber_cut_planes: usize,
    /// Total internal interface area, element faces.
    pub total_interface_area: usize,
    /// Average boundary area per partition: `2·total/P`.
    pub average_boundary_area: f64,
}

impl CommModel {
    /// 1D communication points for a fiber population crossing the layout.
    pub fn fiber_cuts(&self, n_fibers: usize) -> usize {
        self.fiber_cut_planes * n_fibers
    }
}

/// Neighbor lists, shared-face areas, ghost-layer sizes, and interface
/// totals of a layout.
pub fn boundary_metrics(layout: &PartitionLayout) -> CommModel {
    let p = layout.subdivisions;
    let n = layout.n_partitions();
    let mut neighbors = vec![Vec::new(); n];
    let mut face_areas = vec![Vec::new(); n];
    let mut ghost_elements = vec![0usize; n];
    let mut total = 0usize;

    for rank in 0..n {
        let pos = layout.grid_pos(rank);
        let shape = layout.partition_shape(rank);
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 && dz == 0 {
                        continue;
                    }
                    let nx = pos[0] as i64 + dx;
                    let ny = pos[1] as i64 + dy;
                    let nz = pos[2] as i64 + dz;
                    if nx < 0
                        || ny < 0
                        || nz < 0
                        || nx >= p[0] as i64
                        || ny >= p[1] as i64
                        || nz >= p[2] as i64
                    {
                        continue;
                    }
                    let other = layout.rank_of(nx as usize, ny as usize, nz as usize);
                    neighbors[rank].push(other);
                    // Face adjacency: exactly one offset nonzero.
                    let face_axis = match (dx != 0, dy != 0, dz != 0) {
                        (true, false, false) => Some(0),
                        (false, true, false) => Some(1),
                        (false, false, true) => Some(2),
                        _ => None,
                    };
                    if let Some(axis) = face_axis {
                        let area = match axis {
                            0 => shape[1] * shape[2],
                            1 => shape[0] * shape[2],
                            _ => shape[0] * shape[1],
                        };
                        face_areas[rank].push((other, area));
                        ghost_elements[rank] += area;
                        total += area; // counts each pair twice
                    }
                }
            }
        }
        neighbors[rank].sort_unstable();
        face_areas[rank].sort_unstable();
    }

    CommModel {
        neighbors,
        face_areas,
        ghost_elements,
        fiber_cut_planes: p[0] - 1,
        total_interface_area: total / 2,
        average_boundary_area: total as f64 / n as f64,
    }
}

/// One row of the doubling weak-scaling series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingStep {
    /// Compute nodes (24 processes each).
    pub nodes: usize,
    pub processes: usize,
    /// Domain size in 3D elements.
    pub domain: [usize; 3],
    /// Fibers threading the domain (2×2 per element cross-section).
    pub fibers: usize,
    /// 1D elements (3 per 3D element along each fiber).
    pub elements_1d: usize,
    pub pillar: PartitionLayout,
    pub cubic: PartitionLayout,
}

/// The doubling weak-scaling series: the domain starts at 2×12×8 elements
/// and doubles along x, then z, then y, cyclically; process count doubles
/// with it (24 per node). Cubic partitions keep 2×2×2 elements per process
/// (minimal-area factorization); pillar partitions span x and halve their
/// cross-section alternately in z and y, keeping 8 elements per process.
pub fn weak_scaling_ladder(steps: usize) -> Vec<ScalingStep> {
    let mut rows = Vec::with_capacity(steps);
    let mut domain = [2usize, 12, 8];
    // Per-process element shape of the pillar layout (x entry tracks the
    // domain).
    let mut pillar_shape = [2usize, 2, 2];
    let refine_axes = [0usize, 2, 1];
    let halve_axes = [2usize, 1];
    for step in 0..steps {
        if step > 0 {
            let axis = refine_axes[(step - 1) % 3];
            domain[axis] *= 2;
            pillar_shape[axis] *= 2;
            let halve = halve_axes[(step - 1) % 2];
            pillar_shape[halve] /= 2;
        }
        pillar_shape[0] = domain[0];
        let nodes = 1usize << step;
        let processes = 24 * nodes;
        let pillar_p = [
            1,
            domain[1] / pillar_shape[1],
            domain[2] / pillar_shape[2],
        ];
        let pillar = PartitionLayout::from_subdivisions(domain, pillar_p, Strategy::Pillar)
            .expect("ladder pillar layout is admissible");
        let cubic = factorize(processes, domain, Strategy::Cubic)
            .expect("ladder cubic layout is admissible");
        let fibers = (2 * domain[1]) * (2 * domain[2]);
        rows.push(ScalingStep {
            nodes,
            processes,
            domain,
            fibers,
            elements_1d: 3 * domain[0] * fibers,
            pillar,
            cubic,
        });
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Element-level rank map for brute-force oracles.
    fn rank_map(layout: &PartitionLayout) -> Vec<usize> {
        let [ex, ey, ez] = layout.domain;
        let mut map = vec![0; ex * ey * ez];
        for z in 0..ez {
            for y in 0..ey {
                for x in 0..ex {
                    map[x + ex * (y + ey * z)] = layout.owner_of([x, y, z]);
                }
            }
        }
        map
    }

    /// Brute-force interface area: count element-face pairs whose owners
    /// differ.
    fn brute_force_area(layout: &PartitionLayout) -> usize {
        let [ex, ey, ez] = layout.domain;
        let map = rank_map(layout);
        let at = |x: usize, y: usize, z: usize| map[x + ex * (y + ey * z)];
        let mut area = 0;
        for z in 0..ez {
            for y in 0..ey {
                for x in 0..ex {
                    if x + 1 < ex && at(x, y, z) != at(x + 1, y, z) {
                        area += 1;
                    }
                    if y + 1 < ey && at(x, y, z) != at(x, y + 1, z) {
                        area += 1;
                    }
                    if z + 1 < ez && at(x, y, z) != at(x, y, z + 1) {
                        area += 1;
                    }
                }
            }
        }
        area
    }

    #[test]
    fn factorize_prefers_minimal_interface_area() {
        let layout = factorize(24, [2, 12, 8], Strategy::Cubic).unwrap();
        assert_eq!(layout.subdivisions, [1, 6, 4]);
        for rank in 0..layout.n_partitions() {
            assert_eq!(layout.partition_shape(rank), [2, 2, 2]);
        }

        let table2 = factorize(24, [16, 11, 7], Strategy::Cubic).unwrap();
        assert_eq!(table2.subdivisions, [4, 3, 2]);

        let single = factorize(1, [5, 5, 5], Strategy::Cubic).unwrap();
        assert_eq!(single.subdivisions, [1, 1, 1]);
        assert_eq!(boundary_metrics(&single).total_interface_area, 0);
    }

    #[test]
    fn area_ties_break_toward_more_fiber_axis_subdivisions() {
        // Three layouts of 144 processes on 144×12×12 share the minimal
        // interface area 8496; the tie goes to the lexicographically
        // greatest subdivision tuple.
        let domain = [144, 12, 12];
        for p in [[36, 2, 2], [24, 3, 2], [24, 2, 3]] {
            assert_eq!(interface_area(domain, p), 8496);
        }
        let layout = factorize(144, domain, Strategy::Cubic).unwrap();
        assert_eq!(layout.subdivisions, [36, 2, 2]);
        let metrics = boundary_metrics(&layout);
        assert_eq!(metrics.total_interface_area, 8496);
        assert_eq!(metrics.average_boundary_area, 118.0);
    }

    #[test]
    fn slab_layout_interface_metrics() {
        // 144 one-element-thick slabs on the same domain.
        let layout =
            PartitionLayout::from_subdivisions([144, 12, 12], [144, 1, 1], Strategy::General)
                .unwrap();
        let metrics = boundary_metrics(&layout);
        assert_eq!(metrics.total_interface_area, 20592);
        assert_eq!(metrics.average_boundary_area, 286.0);
        let ratio = 20592.0_f64 / 8496.0;
        assert!((ratio - 2.42).abs() < 0.01);
        // Every fiber is cut 143 times.
        assert_eq!(metrics.fiber_cut_planes, 143);
        assert_eq!(metrics.fiber_cuts(576), 143 * 576);
    }

    #[test]
    fn pillar_layouts_never_cut_fibers() {
        let layout = factorize(24, [2, 12, 8], Strategy::Pillar).unwrap();
        assert_eq!(layout.subdivisions[0], 1);
        let metrics = boundary_metrics(&layout);
        assert_eq!(metrics.fiber_cut_planes, 0);
        assert_eq!(metrics.fiber_cuts(384), 0);
    }

    #[test]
    fn infeasible_requests_are_reported() {
        // Prime process count with a cross-section too small for it.
        let err = factorize(13, [4, 3, 3], Strategy::Pillar).unwrap_err();
        assert_eq!(err.to_string(), "infeasible layout");
        assert!(factorize(7, [2, 2, 2], Strategy::Cubic).is_err());
        assert!(factorize(0, [4, 4, 4], Strategy::Cubic).is_err());
    }

    #[test]
    fn metrics_match_brute_force_on_small_domains() {
        let domains = [[4, 4, 4], [5, 3, 7], [8, 8, 8], [6, 2, 5]];
        for &domain in &domains {
            for processes in [2usize, 4, 6, 8, 12] {
                for p in factorizations(processes, domain, Strategy::Cubic) {
                    let layout =
                        PartitionLayout::from_subdivisions(domain, p, Strategy::General).unwrap();
                    let metrics = boundary_metrics(&layout);
                    assert_eq!(
                        metrics.total_interface_area,
                        brute_force_area(&layout),
                        "domain {domain:?} p {p:?}"
                    );
                    assert_eq!(
                        metrics.total_interface_area,
                        interface_area(domain, p),
                        "closed form, domain {domain:?} p {p:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn partitions_tile_the_domain() {
        let layout =
            PartitionLayout::from_subdivisions([7, 5, 6], [3, 2, 4], Strategy::General).unwrap();
        layout.validate().unwrap();
        let [ex, ey, ez] = layout.domain;
        let mut counts = vec![0usize; layout.n_partitions()];
        for z in 0..ez {
            for y in 0..ey {
                for x in 0..ex {
                    // Exactly one partition box contains each element.
                    let mut owners = 0;
                    for rank in 0..layout.n_partitions() {
                        let b = layout.partition_box(rank);
                        if (b[0][0]..b[0][1]).contains(&x)
                            && (b[1][0]..b[1][1]).contains(&y)
                            && (b[2][0]..b[2][1]).contains(&z)
                        {
                            owners += 1;
                            assert_eq!(rank, layout.owner_of([x, y, z]));
                            counts[rank] += 1;
                        }
                    }
                    assert_eq!(owners, 1);
                }
            }
        }
        assert_eq!(counts.iter().sum::<usize>(), ex * ey * ez);
        // Ragged remainders go to the highest-index partitions: 7 = 2+2+3.
        assert_eq!(layout.splits[0], vec![0, 2, 4, 7]);
    }

    #[test]
    fn neighbor_lists_respect_the_moore_bound_and_are_symmetric() {
        let layout =
            PartitionLayout::from_subdivisions([4, 4, 4], [4, 4, 4], Strategy::General).unwrap();
        let metrics = boundary_metrics(&layout);
        for (rank, nbrs) in metrics.neighbors.iter().enumerate() {
            assert!(nbrs.len() <= 26);
            for &other in nbrs {
                assert!(metrics.neighbors[other].contains(&rank));
            }
        }
        // A fully interior partition touches all 26.
        let interior = layout.rank_of(1, 1, 1);
        assert_eq!(metrics.neighbors[interior].len(), 26);

        // Face areas are symmetric.
        for (rank, pairs) in metrics.face_areas.iter().enumerate() {
            for &(other, area) in pairs {
                assert!(metrics.face_areas[other].contains(&(rank, area)));
            }
        }
    }

    #[test]
    fn ghost_layers_match_brute_force_adjacency() {
        let layout =
            PartitionLayout::from_subdivisions([5, 4, 6], [2, 2, 3], Strategy::General).unwrap();
        let metrics = boundary_metrics(&layout);
        let [ex, ey, ez] = layout.domain;
        let map = rank_map(&layout);
        let at = |x: usize, y: usize, z: usize| map[x + ex * (y + ey * z)];
        for rank in 0..layout.n_partitions() {
            let mut ghosts = std::collections::HashSet::new();
            for z in 0..ez {
                for y in 0..ey {
                    for x in 0..ex {
                        if at(x, y, z) != rank {
                            continue;
                        }
                        let mut check = |nx: i64, ny: i64, nz: i64| {
                            if nx >= 0
                                && ny >= 0
                                && nz >= 0
                                && (nx as usize) < ex
                                && (ny as usize) < ey
                                && (nz as usize) < ez
                                && at(nx as usize, ny as usize, nz as usize) != rank
                            {
                                ghosts.insert((nx, ny, nz));
                            }
                        };
                        check(x as i64 - 1, y as i64, z as i64);
                        check(x as i64 + 1, y as i64, z as i64);
                        check(x as i64, y as i64 - 1, z as i64);
                        check(x as i64, y as i64 + 1, z as i64);
                        check(x as i64, y as i64, z as i64 - 1);
                        check(x as i64, y as i64, z as i64 + 1);
                    }
                }
            }
            assert_eq!(metrics.ghost_elements[rank], ghosts.len(), "rank {rank}");
        }
    }

    #[test]
    fn cubic_average_boundary_never_exceeds_pillar() {
        let cases = [
            (48usize, [4usize, 12, 8]),
            (24, [2, 12, 8]),
            (12, [6, 4, 4]),
            (16, [8, 4, 4]),
        ];
        for (processes, domain) in cases {
            let cubic = factorize(processes, domain, Strategy::Cubic).unwrap();
            let pillar = factorize(processes, domain, Strategy::Pillar).unwrap();
            let ac = boundary_metrics(&cubic).average_boundary_area;
            let ap = boundary_metrics(&pillar).average_boundary_area;
            assert!(ac <= ap, "P={processes} domain {domain:?}: {ac} vs {ap}");
        }
    }

    #[test]
    fn optimizer_reproduces_the_published_partition_choices() {
        // (processes, domain, pillar subdivisions, cubic subdivisions)
        let rows = [
            (24usize, [16usize, 11, 7], [1usize, 6, 4], [4usize, 3, 2]),
            (40, [18, 19, 7], [1, 10, 4], [4, 5, 2]),
            (60, [18, 19, 11], [1, 10, 6], [4, 5, 3]),
            (84, [17, 27, 11], [1, 14, 6], [4, 7, 3]),
            (140, [38, 20, 7], [1, 20, 7], [10, 7, 2]),
            (192, [45, 16, 12], [1, 16, 12], [12, 4, 4]),
        ];
        for (processes, domain, pillar, cubic) in rows {
            let got_pillar =
                optimize_layout(processes, domain, Strategy::Pillar, DEFAULT_UNUSED_WEIGHT);
            assert_eq!(
                got_pillar.subdivisions, pillar,
                "pillar P={processes} domain {domain:?}"
            );
            let got_cubic =
                optimize_layout(processes, domain, Strategy::Cubic, DEFAULT_UNUSED_WEIGHT);
            assert_eq!(
                got_cubic.subdivisions, cubic,
                "cubic P={processes} domain {domain:?}"
            );
        }
    }

    #[test]
    fn optimizer_weight_controls_the_process_count_trade() {
        // With no penalty the optimizer happily drops to 36 processes for a
        // smaller interface; an infinite penalty forces exact usage.
        let free = optimize_layout(40, [18, 19, 7], Strategy::Cubic, 0.0);
        assert_eq!(free.subdivisions, [3, 6, 2]);
        assert_eq!(free.n_partitions(), 36);

        let exact = optimize_layout(40, [18, 19, 7], Strategy::Cubic, f64::INFINITY);
        assert_eq!(exact.n_partitions(), 40);
        assert_eq!(exact.subdivisions, [4, 5, 2]);

        // Nothing admissible in range: fall back to one partition.
        let fallback = optimize_layout(13, [1, 2, 2], Strategy::Cubic, DEFAULT_UNUSED_WEIGHT);
        assert_eq!(fallback.subdivisions, [1, 1, 1]);
    }

    #[test]
    fn weak_scaling_ladder_reproduces_the_doubling_series() {
        let rows = weak_scaling_ladder(6);
        let expect: [(usize, [usize; 3], usize, [usize; 3], [usize; 3], [usize; 3]); 6] = [
            // nodes, domain, 1D elements, pillar p, pillar shape, cubic p
            (1, [2, 12, 8], 2304, [1, 6, 4], [2, 2, 2], [1, 6, 4]),
            (2, [4, 12, 8], 4608, [1, 6, 8], [4, 2, 1], [2, 6, 4]),
            (4, [4, 12, 16], 9216, [1, 12, 8], [4, 1, 2], [2, 6, 8]),
            (8, [4, 24, 16], 18432, [1, 12, 16], [4, 2, 1], [2, 12, 8]),
            (16, [8, 24, 16], 36864, [1, 24, 16], [8, 1, 1], [4, 12, 8]),
            (32, [8, 24, 32], 73728, [1, 24, 32], [8, 1, 1], [4, 12, 16]),
        ];
        for (row, (nodes, domain, el1d, pillar_p, pillar_shape, cubic_p)) in
            rows.iter().zip(expect)
        {
            assert_eq!(row.nodes, nodes);
            assert_eq!(row.processes, 24 * nodes);
            assert_eq!(row.domain, domain);
            assert_eq!(row.elements_1d, el1d);
            assert_eq!(row.pillar.subdivisions, pillar_p);
            assert_eq!(row.pillar.partition_shape(0), pillar_shape);
            assert_eq!(row.cubic.subdivisions, cubic_p);
            // Cubic processes always own 2×2×2 elements.
            for rank in 0..row.cubic.n_partitions() {
                assert_eq!(row.cubic.partition_shape(rank), [2, 2, 2]);
            }
            assert_eq!(row.pillar.n_partitions(), row.processes);
            assert_eq!(row.cubic.n_partitions(), row.processes);
        }
    }

    #[test]
    fn layouts_serialize_to_json_and_back() {
        let layout = factorize(24, [16, 11, 7], Strategy::Cubic).unwrap();
        let json = serde_json::to_string(&layout).unwrap();
        let back: PartitionLayout = serde_json::from_str(&json).unwrap();
        assert_eq!(layout, back);
    }
}
