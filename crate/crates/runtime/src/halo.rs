//! Exchange plans between partitions.
//!
//! A [`HaloPlan`] lists, per partition, every send and receive of a run:
//! one-element-deep displacement ghost layers across shared partition faces
//! (consumed by fiber-position interpolation), membrane-potential slices of
//! fibers cut by the decomposition (gathered to the fiber's head partition
//! for each diffusion solve and scattered back), and end-of-run timing
//! hand-offs. The plan is built once from the layout and the fiber
//! embedding, validated for mutual consistency, and drives both the threaded
//! executor and the communication-volume accounting.

use std::collections::BTreeMap;

use musim_core::mechanics::MuscleMesh;
use musim_core::partition::PartitionLayout;
use musim_core::transfer::{EmbeddingMap, FiberLayout};
use serde::{Deserialize, Serialize};

use crate::RuntimeError;

/// Wire size of one displacement ghost element: 8 corner nodes × 3
/// components × 8 bytes.
pub const DISPLACEMENT_BYTES_PER_ELEMENT: u64 = 8 * 3 * 8;

/// Wire size of one membrane-potential value.
pub const VM_BYTES_PER_NODE: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    /// Nodal displacements of face-layer elements, one element deep.
    Displacement,
    /// Membrane-potential slices of a cut fiber.
    VmInterface,
    /// End-of-run timing report, sent to rank 0.
    Timing,
}

/// One planned transfer. `indices` are global element ids for displacement
/// payloads, global fiber-node ids for membrane-potential payloads, and
/// empty for timing payloads; always ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HaloTransfer {
    /// Peer partition rank.
    pub neighbor: usize,
    pub indices: Vec<usize>,
    pub kind: PayloadKind,
}

/// All planned transfers of a run, indexed by partition rank.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HaloPlan {
    pub sends: Vec<Vec<HaloTransfer>>,
    pub recvs: Vec<Vec<HaloTransfer>>,
}

impl HaloPlan {
    pub fn n_partitions(&self) -> usize {
        self.sends.len()
    }

    /// Mutual consistency: every send must have exactly one matching receive
    /// on the peer (same endpoints, kind, and index set), and vice versa.
    pub fn validate(&self) -> Result<(), RuntimeError> {
        if self.sends.len() != self.recvs.len() {
            return Err(RuntimeError::HaloProtocolViolation);
        }
        let p = self.sends.len();
        let check_entry = |owner: usize, t: &HaloTransfer| -> Result<(), RuntimeError> {
            let indices_ok = match t.kind {
                PayloadKind::Timing => t.indices.is_empty(),
                _ => !t.indices.is_empty() && t.indices.windows(2).all(|w| w[0] < w[1]),
            };
            if t.neighbor >= p || t.neighbor == owner || !indices_ok {
                return Err(RuntimeError::HaloProtocolViolation);
            }
            Ok(())
        };
        // (source, destination, kind, indices) multisets from both sides.
        let mut from_sends = Vec::new();
        for (rank, sends) in self.sends.iter().enumerate() {
            for t in sends {
                check_entry(rank, t)?;
                from_sends.push((rank, t.neighbor, t.kind, &t.indices));
            }
        }
        let mut from_recvs = Vec::new();
        for (rank, recvs) in self.recvs.iter().enumerate() {
            for t in recvs {
                check_entry(rank, t)?;
                from_recvs.push((t.neighbor, rank, t.kind, &t.indices));
            }
        }
        from_sends.sort();
        from_recvs.sort();
        if from_sends != from_recvs {
            return Err(RuntimeError::HaloProtocolViolation);
        }
        Ok(())
    }

    /// Bytes on the wire for one full displacement ghost exchange.
    pub fn displacement_bytes_per_exchange(&self) -> u64 {
        self.kind_bytes(PayloadKind::Displacement, DISPLACEMENT_BYTES_PER_ELEMENT)
    }

    /// Bytes on the wire for the membrane-potential interface of one 1D step
    /// (each cut fiber is gathered and scattered once per step).
    pub fn vm_interface_bytes_per_step(&self) -> u64 {
        self.kind_bytes(PayloadKind::VmInterface, VM_BYTES_PER_NODE)
    }

    fn kind_bytes(&self, kind: PayloadKind, per_index: u64) -> u64 {
        self.sends
            .iter()
            .flatten()
            .filter(|t| t.kind == kind)
            .map(|t| t.indices.len() as u64 * per_index)
            .sum()
    }
}

/// The full exchange plan of a layout: displacement ghost layers across
/// every shared partition face, gather/scatter slices for every cut fiber,
/// and timing hand-offs to rank 0.
pub fn build_halo_plan(
    layout: &PartitionLayout,
    mesh: &MuscleMesh,
    fibers: &FiberLayout,
    map: &EmbeddingMap,
) -> Result<HaloPlan, RuntimeError> {
    layout.validate()?;
    if layout.domain != mesh.dims {
        return Err(RuntimeError::ShapeMismatch(
            "partition domain differs from the mesh",
        ));
    }
    if map.n_fiber_nodes() != fibers.n_nodes()
        || map.element_fiber_nodes.len() != mesh.n_elements()
    {
        return Err(RuntimeError::ShapeMismatch(
            "embedding map does not match the fiber layout",
        ));
    }
    let p = layout.n_partitions();
    let mut sends: Vec<Vec<HaloTransfer>> = vec![Vec::new(); p];
    let mut recvs: Vec<Vec<HaloTransfer>> = vec![Vec::new(); p];

    // Displacement ghost layers: for each face-adjacent pair, the one-deep
    // layer of owned elements on the sender's side of the shared face.
    for rank in 0..p {
        let pos = layout.grid_pos(rank);
        let b = layout.partition_box(rank);
        for axis in 0..3 {
            for dir in [-1isize, 1] {
                let n = pos[axis] as isize + dir;
                if n < 0 || n >= layout.subdivisions[axis] as isize {
                    continue;
                }
                let mut npos = pos;
                npos[axis] = n as usize;
                let neighbor = layout.rank_of(npos[0], npos[1], npos[2]);
                let fixed = if dir > 0 { b[axis][1] - 1 } else { b[axis][0] };
                let mut layer = [b[0], b[1], b[2]];
                layer[axis] = [fixed, fixed + 1];
                let mut ids = Vec::new();
                for ez in layer[2][0]..layer[2][1] {
                    for ey in layer[1][0]..layer[1][1] {
                        for ex in layer[0][0]..layer[0][1] {
                            ids.push(mesh.element_index(ex, ey, ez));
                        }
                    }
                }
                sends[rank].push(HaloTransfer {
                    neighbor,
                    indices: ids.clone(),
                    kind: PayloadKind::Displacement,
                });
                recvs[neighbor].push(HaloTransfer {
                    neighbor: rank,
                    indices: ids,
                    kind: PayloadKind::Displacement,
                });
            }
        }
    }

    // Cut fibers: every non-head owner sends its slice to the fiber's head
    // (the lowest owning rank) and receives the diffused slice back.
    if layout.subdivisions[0] > 1 {
        let npf = fibers.nodes_per_fiber;
        for fiber in 0..fibers.n_fibers() {
            let mut per_owner: Vec<(usize, Vec<usize>)> = Vec::new();
            for node in 0..npf {
                let id = fibers.node_id(fiber, node);
                let owner = layout.owner_of(mesh.element_grid_pos(map.node_element[id]));
                match per_owner.iter_mut().find(|(o, _)| *o == owner) {
                    Some((_, ids)) => ids.push(id),
                    None => per_owner.push((owner, vec![id])),
                }
            }
            let head = per_owner.iter().map(|(o, _)| *o).min().unwrap();
            for (owner, ids) in per_owner {
                if owner == head {
                    continue;
                }
                sends[owner].push(HaloTransfer {
                    neighbor: head,
                    indices: ids.clone(),
                    kind: PayloadKind::VmInterface,
                });
                recvs[head].push(HaloTransfer {
                    neighbor: owner,
                    indices: ids.clone(),
                    kind: PayloadKind::VmInterface,
                });
                sends[head].push(HaloTransfer {
                    neighbor: owner,
                    indices: ids.clone(),
                    kind: PayloadKind::VmInterface,
                });
                recvs[owner].push(HaloTransfer {
                    neighbor: head,
                    indices: ids,
                    kind: PayloadKind::VmInterface,
                });
            }
        }
    }

    // Timing reports converge on rank 0.
    for rank in 1..p {
        sends[rank].push(HaloTransfer {
            neighbor: 0,
            indices: Vec::new(),
            kind: PayloadKind::Timing,
        });
        recvs[0].push(HaloTransfer {
            neighbor: rank,
            indices: Vec::new(),
            kind: PayloadKind::Timing,
        });
    }

    Ok(HaloPlan { sends, recvs })
}

/// One synchronous exchange round of `kind`: `supply(rank, index)` produces
/// the outgoing value for each planned index, and the result holds, per
/// partition, the received values keyed by global index along with their
/// source rank. The threaded executor performs the same transfers over
/// channels; this form exists for plan inspection and accounting.
pub fn exchange_halos<T: Clone>(
    plan: &HaloPlan,
    kind: PayloadKind,
    supply: impl Fn(usize, usize) -> T,
) -> Result<Vec<BTreeMap<usize, (usize, T)>>, RuntimeError> {
    plan.validate()?;
    let mut inboxes: Vec<BTreeMap<usize, (usize, T)>> = vec![BTreeMap::new(); plan.n_partitions()];
    for (rank, sends) in plan.sends.iter().enumerate() {
        for t in sends.iter().filter(|t| t.kind == kind) {
            for &i in &t.indices {
                if inboxes[t.neighbor].insert(i, (rank, supply(rank, i))).is_some() {
                    return Err(RuntimeError::HaloProtocolViolation);
                }
            }
        }
    }
    Ok(inboxes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use musim_core::partition::{boundary_metrics, Strategy};
    use musim_core::transfer::build_embedding;

    fn setup(
        dims: [usize; 3],
        subdivisions: [usize; 3],
    ) -> (PartitionLayout, MuscleMesh, FiberLayout, EmbeddingMap) {
        let mesh = MuscleMesh::box_grid(
            dims,
            [dims[0] as f64 * 0.5, dims[1] as f64 * 0.5, dims[2] as f64 * 0.5],
            [1.0, 0.0, 0.0],
        )
        .unwrap();
        let fibers = FiberLayout::per_element(&mesh, 1, 3 * dims[0] + 1);
        let map = build_embedding(&mesh, &fibers).unwrap();
        let layout =
            PartitionLayout::from_subdivisions(dims, subdivisions, Strategy::General).unwrap();
        (layout, mesh, fibers, map)
    }

    #[test]
    fn two_partition_plan_lists_the_shared_face_layers() {
        let (layout, mesh, fibers, map) = setup([4, 2, 2], [2, 1, 1]);
        let plan = build_halo_plan(&layout, &mesh, &fibers, &map).unwrap();
        plan.validate().unwrap();

        let d0: Vec<_> = plan.sends[0]
            .iter()
            .filter(|t| t.kind == PayloadKind::Displacement)
            .collect();
        assert_eq!(d0.len(), 1);
        assert_eq!(d0[0].neighbor, 1);
        assert_eq!(d0[0].indices, vec![1, 5, 9, 13]);
        let d1: Vec<_> = plan.sends[1]
            .iter()
            .filter(|t| t.kind == PayloadKind::Displacement)
            .collect();
        assert_eq!(d1[0].indices, vec![2, 6, 10, 14]);

        let model = boundary_metrics(&layout);
        assert_eq!(model.ghost_elements, vec![4, 4]);
        assert_eq!(
            plan.displacement_bytes_per_exchange(),
            (4 + 4) * DISPLACEMENT_BYTES_PER_ELEMENT
        );
    }

    #[test]
    fn ghost_elements_hold_the_neighbors_rank_after_exchange() {
        let (layout, mesh, fibers, map) = setup([4, 2, 2], [2, 1, 1]);
        let plan = build_halo_plan(&layout, &mesh, &fibers, &map).unwrap();
        let inboxes =
            exchange_halos(&plan, PayloadKind::Displacement, |rank, _| rank as f64).unwrap();
        let model = boundary_metrics(&layout);
        for rank in 0..2 {
            assert_eq!(inboxes[rank].len(), model.ghost_elements[rank]);
            for (source, value) in inboxes[rank].values() {
                assert_eq!(*source, 1 - rank);
                assert_eq!(*value, (1 - rank) as f64);
            }
        }
        assert_eq!(
            inboxes[0].keys().copied().collect::<Vec<_>>(),
            vec![2, 6, 10, 14]
        );
    }

    #[test]
    fn single_partition_plan_is_a_no_op() {
        let (layout, mesh, fibers, map) = setup([2, 2, 2], [1, 1, 1]);
        let plan = build_halo_plan(&layout, &mesh, &fibers, &map).unwrap();
        plan.validate().unwrap();
        assert!(plan.sends[0].is_empty());
        assert!(plan.recvs[0].is_empty());
        let inboxes = exchange_halos(&plan, PayloadKind::Displacement, |_, _| 0.0).unwrap();
        assert!(inboxes[0].is_empty());
        assert_eq!(plan.displacement_bytes_per_exchange(), 0);
        assert_eq!(plan.vm_interface_bytes_per_step(), 0);
    }

    #[test]
    fn tampered_plans_fail_validation() {
        let (layout, mesh, fibers, map) = setup([4, 2, 2], [2, 2, 1]);
        let plan = build_halo_plan(&layout, &mesh, &fibers, &map).unwrap();
        plan.validate().unwrap();

        let mut missing = plan.clone();
        missing.recvs[1].pop();
        assert_eq!(
            missing.validate().unwrap_err().to_string(),
            "halo protocol violation"
        );

        let mut reordered = plan.clone();
        let t = reordered.sends[0]
            .iter_mut()
            .find(|t| t.kind == PayloadKind::Displacement)
            .unwrap();
        t.indices.swap(0, 1);
        assert!(reordered.validate().is_err());

        let mut rerouted = plan.clone();
        let p = rerouted.sends[0]
            .iter_mut()
            .find(|t| t.kind == PayloadKind::Displacement)
            .unwrap();
        p.neighbor = 3;
        assert!(rerouted.validate().is_err());

        let mut self_send = plan;
        self_send.sends[0].push(HaloTransfer {
            neighbor: 0,
            indices: vec![0],
            kind: PayloadKind::Displacement,
        });
        assert!(self_send.validate().is_err());
    }

    #[test]
    fn vm_transfers_count_the_fiber_cuts() {
        let (layout, mesh, fibers, map) = setup([4, 2, 2], [4, 1, 1]);
        let plan = build_halo_plan(&layout, &mesh, &fibers, &map).unwrap();
        plan.validate().unwrap();

        let model = boundary_metrics(&layout);
        let gathers: Vec<_> = plan
            .sends
            .iter()
            .enumerate()
            .flat_map(|(rank, sends)| {
                sends
                    .iter()
                    .filter(move |t| t.kind == PayloadKind::VmInterface && t.neighbor < rank)
            })
            .collect();
        assert_eq!(gathers.len(), model.fiber_cuts(fibers.n_fibers()));
        assert_eq!(gathers.len(), (4 - 1) * 4);

        // 13 nodes per fiber over 4 single-element slabs: nodes 0–3 belong to
        // the head, then 3 nodes per downstream partition.
        let npf = fibers.nodes_per_fiber;
        assert_eq!(npf, 13);
        for t in &plan.sends[1] {
            if t.kind == PayloadKind::VmInterface && t.neighbor == 0 {
                let fiber = t.indices[0] / npf;
                let expect: Vec<usize> = (4..7).map(|j| fiber * npf + j).collect();
                assert_eq!(t.indices, expect);
            }
        }
        // Gather + scatter, once per 1D step: 2 × 4 fibers × 9 remote nodes.
        assert_eq!(plan.vm_interface_bytes_per_step(), 2 * 4 * 9 * 8);
    }

    #[test]
    fn pillar_plans_carry_no_vm_interface_payloads() {
        let (layout, mesh, fibers, map) = setup([4, 2, 2], [1, 2, 2]);
        let plan = build_halo_plan(&layout, &mesh, &fibers, &map).unwrap();
        plan.validate().unwrap();
        assert!(plan
            .sends
            .iter()
            .flatten()
            .all(|t| t.kind != PayloadKind::VmInterface));
        assert_eq!(plan.vm_interface_bytes_per_step(), 0);
        // Timing reports still converge on rank 0.
        let timing: Vec<_> = plan.recvs[0]
            .iter()
            .filter(|t| t.kind == PayloadKind::Timing)
            .collect();
        assert_eq!(timing.len(), 3);
        assert!(timing.iter().all(|t| t.indices.is_empty()));
    }

    #[test]
    fn displacement_volumes_match_the_boundary_metrics_on_a_ragged_layout() {
        let (layout, mesh, fibers, map) = setup([5, 4, 6], [2, 2, 3]);
        let plan = build_halo_plan(&layout, &mesh, &fibers, &map).unwrap();
        plan.validate().unwrap();
        let model = boundary_metrics(&layout);
        for rank in 0..layout.n_partitions() {
            for &(neighbor, area) in &model.face_areas[rank] {
                let planned: usize = plan.sends[rank]
                    .iter()
                    .filter(|t| t.kind == PayloadKind::Displacement && t.neighbor == neighbor)
                    .map(|t| t.indices.len())
                    .sum();
                assert_eq!(planned, area, "face {rank}->{neighbor}");
            }
            let received: usize = plan.recvs[rank]
                .iter()
                .filter(|t| t.kind == PayloadKind::Displacement)
                .map(|t| t.indices.len())
                .sum();
            assert_eq!(received, model.ghost_elements[rank]);
        }
        assert_eq!(
            plan.displacement_bytes_per_exchange(),
            2 * model.total_interface_area as u64 * DISPLACEMENT_BYTES_PER_ELEMENT
        );
    }

    #[test]
    fn plans_roundtrip_through_json() {
        let (layout, mesh, fibers, map) = setup([4, 2, 2], [2, 2, 1]);
        let plan = build_halo_plan(&layout, &mesh, &fibers, &map).unwrap();
        let json = serde_json::to_string(&plan).unwrap();
        let back: HaloPlan = serde_json::from_str(&json).unwrap();
        assert_eq!(back, plan);
    }
}
