//! In-process parallel execution of the coupled staggered loop.
//!
//! One worker thread per partition advances the fiber electrophysiology and
//! the fiber–mesh transfer for its own element box; the coordinating main
//! thread gathers the homogenized activation, runs the global equilibrium
//! solve, and scatters the displacement field back. Workers share no mutable
//! state: cut-fiber potentials are gathered to the fiber's head partition
//! for every diffusion solve and scattered back, and one-element-deep
//! displacement ghost layers cross each shared partition face before
//! interpolation, all over channels and all following the [`HaloPlan`].
//!
//! Every floating-point kernel is the same code the serial
//! [`Simulation::coupled_step`] runs, applied to the same operands in the
//! same order — per-node reaction sub-steps, whole-fiber diffusion on the
//! head, ascending-id activation means, trilinear interpolation, and finite
//! differences for half-sarcomere lengths are all order-independent across
//! the decomposition — so a parallel run reproduces the serial trajectory
//! bitwise on any layout.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Arc;
use std::time::Instant;

use musim_core::cell::{gamma_from_a2, CellParams, HodgkinHuxley, MembraneModel, StimulusProtocol};
use musim_core::fiber::{
    build_implicit_euler_system, linear_solve, DiffusionStepper, FiberMesh, SolveMethod,
};
use musim_core::mechanics::{
    newton_solve, shape_values, DisplacementField, MaterialParams, MuscleMesh, NewtonOptions,
};
use musim_core::partition::PartitionLayout;
use musim_core::splitting::{
    build_diffusion_stepper, reaction_substeps, stimulus_amplitudes, FiberState, OdeMethod,
    ReactionScratch, Scheme, Simulation, SplittingError, SplittingSchedule, TimeIndex, WorldState,
};
use musim_core::transfer::{build_embedding, EmbeddingMap, FiberLayout, TransferError};

use crate::halo::{
    build_halo_plan, HaloPlan, PayloadKind, DISPLACEMENT_BYTES_PER_ELEMENT, VM_BYTES_PER_NODE,
};
use crate::report::{TimingReport, WorkerStats};
use crate::RuntimeError;

/// Everything needed to build one coupled run, serially or in parallel.
#[derive(Debug, Clone)]
pub struct CoupledScenario<M: MembraneModel + Clone = HodgkinHuxley> {
    pub schedule: SplittingSchedule,
    pub params: CellParams<M>,
    pub stimulus: StimulusProtocol,
    pub fiber_mesh: FiberMesh,
    pub mesh: MuscleMesh,
    pub fibers: FiberLayout,
    pub material: MaterialParams,
    pub newton: NewtonOptions,
}

impl CoupledScenario<HodgkinHuxley> {
    /// Box-grid scenario with 0.5 cm elements, one fiber per element
    /// cross-section, three 1D elements per 3D element, and a midpoint
    /// stimulus pulse of the given amplitude on [0, 0.1) ms.
    pub fn box_demo(
        domain: [usize; 3],
        amplitude: f64,
        schedule: SplittingSchedule,
    ) -> Result<Self, RuntimeError> {
        let params = CellParams::<HodgkinHuxley>::default().calibrate_resting_offset();
        let lengths = [
            domain[0] as f64 * 0.5,
            domain[1] as f64 * 0.5,
            domain[2] as f64 * 0.5,
        ];
        let mesh = MuscleMesh::box_grid(domain, lengths, [1.0, 0.0, 0.0])
            .map_err(SplittingError::from)?;
        let npf = 3 * domain[0] + 1;
        let fiber_mesh = FiberMesh::uniform(npf, lengths[0], 3.828, 500.0, params.c_m);
        let stimulus = StimulusProtocol {
            amplitude,
            t_on: 0.0,
            t_off: 0.1,
            target: vec![npf / 2],
        };
        Ok(Self {
            schedule,
            params,
            stimulus,
            fiber_mesh,
            mesh,
            fibers: FiberLayout::new(domain[1], domain[2], npf),
            material: MaterialParams::default(),
            newton: NewtonOptions::default(),
        })
    }
}

impl<M: MembraneModel + Clone> CoupledScenario<M> {
    /// The serial twin of a parallel run on this scenario.
    pub fn serial(&self) -> Result<(Simulation<M>, WorldState), RuntimeError> {
        let sim = Simulation::new(
            &self.schedule,
            &self.params,
            &self.stimulus,
            &self.fiber_mesh,
            self.mesh.clone(),
            self.fibers,
            self.material,
            self.newton,
        )?;
        let world = sim.resting_world();
        Ok((sim, world))
    }
}

/// Serial reference run: `coupling_steps` staggered steps from rest.
pub fn run_serial<M: MembraneModel + Clone>(
    scenario: &CoupledScenario<M>,
    coupling_steps: usize,
) -> Result<WorldState, RuntimeError> {
    let (mut sim, mut world) = scenario.serial()?;
    for _ in 0..coupling_steps {
        sim.coupled_step(&mut world)?;
    }
    Ok(world)
}

/// One implicit diffusion solve of a fiber stored as contiguous per-owner
/// segments, ascending along the fiber: gather into one vector — on the
/// lowest owning rank in the threaded executor — solve, and scatter the
/// slices back. A single segment (pillar decompositions) degenerates to a
/// purely local solve. Iterative methods that run out of iterations surface
/// as a stall.
pub fn distributed_fiber_solve(
    mesh: &FiberMesh,
    dt: f64,
    method: SolveMethod,
    rel_tol: f64,
    segments: &mut [&mut [f64]],
) -> Result<(), RuntimeError> {
    let n: usize = segments.iter().map(|s| s.len()).sum();
    if n != mesh.n_nodes() {
        return Err(RuntimeError::ShapeMismatch(
            "segments must cover the fiber exactly",
        ));
    }
    let mut v = Vec::with_capacity(n);
    for s in segments.iter() {
        v.extend_from_slice(s);
    }
    let system = build_implicit_euler_system(&v, dt, mesh)?;
    let solution = linear_solve(&system, method, rel_tol)?;
    let mut at = 0;
    for s in segments.iter_mut() {
        s.copy_from_slice(&solution[at..at + s.len()]);
        at += s.len();
    }
    Ok(())
}

/// Result of a parallel run: the assembled world state, per-worker metrics,
/// and the exchange plan the run followed.
#[derive(Debug)]
pub struct ParallelOutcome {
    pub world: WorldState,
    pub report: TimingReport,
    pub plan: HaloPlan,
    /// Global Newton iterations taken at each coupling step.
    pub newton_iterations: Vec<usize>,
    /// Owned 3D element count per worker rank.
    pub elements_per_worker: Vec<usize>,
    /// Rank that runs each fiber's diffusion solve (lowest owning rank).
    pub fiber_workers: Vec<usize>,
}

// ---------------------------------------------------------------------------
// Messages.

enum Msg {
    /// Cut-fiber slice to the head, one per 1D step.
    VmGather {
        step1d: u64,
        fiber: usize,
        from: usize,
        v: Vec<f64>,
    },
    /// Diffused slice back from the head.
    VmScatter {
        step1d: u64,
        fiber: usize,
        from: usize,
        v: Vec<f64>,
    },
    /// Displacement ghost layer: corner displacements of the sender's
    /// face-layer elements, in plan index order.
    Ghost {
        step: usize,
        from: usize,
        elems: Vec<[[f64; 3]; 8]>,
    },
    /// Per-owned-element activation means to the coordinator.
    Means {
        step: usize,
        from: usize,
        means: Vec<f64>,
    },
    /// Displacements of the worker's local nodes, in `local_nodes` order.
    NodalU { step: usize, u: Vec<[f64; 3]> },
    /// Segment state after one coupling step, for trajectory observers.
    Snapshot {
        step: usize,
        from: usize,
        state: Vec<SegmentState>,
    },
    /// Worker finished: metrics plus final fiber state.
    Done {
        from: usize,
        stats: Box<WorkerStats>,
        state: Vec<SegmentState>,
    },
    /// Worker failed; the coordinator aborts the run.
    Failed { from: usize, message: String },
    /// Coordinator tear-down broadcast.
    Abort,
}

/// Final fiber data of one owned segment.
struct SegmentState {
    fiber: usize,
    start: usize,
    v: Vec<f64>,
    gates: Vec<f64>,
    a2: Vec<f64>,
    l_hs: Vec<f64>,
}

/// Buffered receive: pull messages until one matches, keeping the rest in
/// arrival order. Blocking time is added to `waited`.
fn recv_match(
    rx: &Receiver<Msg>,
    pending: &mut VecDeque<Msg>,
    waited: &mut f64,
    pred: impl Fn(&Msg) -> bool,
) -> Result<Msg, RuntimeError> {
    if pending.iter().any(|m| matches!(m, Msg::Abort)) {
        return Err(RuntimeError::Aborted);
    }
    if let Some(i) = pending.iter().position(&pred) {
        return Ok(pending.remove(i).unwrap());
    }
    loop {
        let t = Instant::now();
        let msg = rx.recv().map_err(|_| RuntimeError::Aborted)?;
        *waited += t.elapsed().as_secs_f64();
        if matches!(msg, Msg::Abort) {
            return Err(RuntimeError::Aborted);
        }
        if pred(&msg) {
            return Ok(msg);
        }
        pending.push_back(msg);
    }
}

// ---------------------------------------------------------------------------
// Worker-side structures.

/// How a segment participates in the diffusion solve.
enum SegRole {
    /// The whole fiber is local: solve in place.
    Whole,
    /// This rank heads the cut fiber: gather the remote slices, solve the
    /// assembled fiber, scatter back.
    Head { remotes: Vec<(usize, usize, usize)> },
    /// A downstream slice: hand the nodes to the head, take the result back.
    Remote { head: usize },
}

struct Segment {
    fiber: usize,
    start: usize,
    role: SegRole,
    v: Vec<f64>,
    gates: Vec<f64>,
    a2: Vec<f64>,
    l_hs: Vec<f64>,
    positions: Vec<[f64; 3]>,
    /// Interpolated positions of the adjacent off-rank fiber nodes, refreshed
    /// each coupling step from the ghost layers.
    ext_prev: Option<[f64; 3]>,
    ext_next: Option<[f64; 3]>,
    amp: Vec<f64>,
}

impl Segment {
    fn len(&self) -> usize {
        self.v.len()
    }
}

struct WorkerSetup {
    rank: usize,
    owned_elements: Vec<usize>,
    local_nodes: Vec<usize>,
    segments: Vec<Segment>,
    ghost_sends: Vec<(usize, Vec<usize>)>,
    ghost_recvs: Vec<(usize, Vec<usize>)>,
    needs_stepper: bool,
}

struct Shared<M: MembraneModel + Clone> {
    schedule: SplittingSchedule,
    params: CellParams<M>,
    stimulus: StimulusProtocol,
    fiber_mesh: FiberMesh,
    mesh: Arc<MuscleMesh>,
    map: Arc<EmbeddingMap>,
    fibers: FiberLayout,
    node_spacing: f64,
    coupling_steps: usize,
    /// Ship a state snapshot to the coordinator after every coupling step.
    snapshot_steps: bool,
}

struct WorkerCtx<M: MembraneModel + Clone> {
    setup: WorkerSetup,
    shared: Arc<Shared<M>>,
    rx: Receiver<Msg>,
    peers: Vec<Sender<Msg>>,
    coordinator: Sender<Msg>,
}

fn vec_bytes<T>(v: &[T]) -> u64 {
    std::mem::size_of_val(v) as u64
}

struct Worker<M: MembraneModel + Clone> {
    rank: usize,
    shared: Arc<Shared<M>>,
    segments: Vec<Segment>,
    owned_elements: Vec<usize>,
    local_nodes: Vec<usize>,
    node_slot: HashMap<usize, usize>,
    fiber_node_slot: HashMap<usize, (usize, usize)>,
    ghost_sends: Vec<(usize, Vec<usize>)>,
    ghost_recvs: Vec<(usize, Vec<usize>)>,
    stepper: Option<DiffusionStepper>,
    scratch: ReactionScratch,
    v_full: Vec<f64>,
    u_local: Vec<[f64; 3]>,
    ghost_u: HashMap<usize, [[f64; 3]; 8]>,
    means: Vec<f64>,
    rx: Receiver<Msg>,
    peers: Vec<Sender<Msg>>,
    coordinator: Sender<Msg>,
    pending: VecDeque<Msg>,
    stats: WorkerStats,
}

impl<M: MembraneModel + Clone> Worker<M> {
    fn build(ctx: WorkerCtx<M>) -> Result<Self, RuntimeError> {
        let shared = ctx.shared;
        let setup = ctx.setup;
        let npf = shared.fibers.nodes_per_fiber;
        let stepper = if setup.needs_stepper {
            Some(build_diffusion_stepper(&shared.schedule, &shared.fiber_mesh)?)
        } else {
            None
        };
        let node_slot: HashMap<usize, usize> = setup
            .local_nodes
            .iter()
            .enumerate()
            .map(|(i, &n)| (n, i))
            .collect();
        let mut fiber_node_slot = HashMap::new();
        for (si, seg) in setup.segments.iter().enumerate() {
            for off in 0..seg.len() {
                let id = shared.fibers.node_id(seg.fiber, seg.start + off);
                fiber_node_slot.insert(id, (si, off));
            }
        }
        let ghost_total: usize = setup.ghost_recvs.iter().map(|(_, ids)| ids.len()).sum();
        let mut stats = WorkerStats {
            rank: setup.rank,
            ..WorkerStats::default()
        };
        stats.solver_0d.ghost_elements = ghost_total;
        stats.solver_1d.ghost_elements = ghost_total;
        stats.solver_3d.ghost_elements = ghost_total;
        stats.interpolation.ghost_elements = ghost_total;
        stats.homogenization.ghost_elements = ghost_total;
        stats.total.ghost_elements = ghost_total;
        let means = vec![0.0; setup.owned_elements.len()];
        Ok(Self {
            rank: setup.rank,
            segments: setup.segments,
            owned_elements: setup.owned_elements,
            local_nodes: setup.local_nodes,
            node_slot,
            fiber_node_slot,
            ghost_sends: setup.ghost_sends,
            ghost_recvs: setup.ghost_recvs,
            stepper,
            scratch: ReactionScratch::new(shared.params.membrane.gate_count()),
            v_full: vec![0.0; npf],
            u_local: vec![[0.0; 3]; 0],
            ghost_u: HashMap::new(),
            means,
            rx: ctx.rx,
            peers: ctx.peers,
            coordinator: ctx.coordinator,
            pending: VecDeque::new(),
            stats,
            shared,
        })
    }

    /// Bytes held in the worker's simulation state (capacity, not length).
    fn state_bytes(&self) -> u64 {
        let mut bytes = 0u64;
        for seg in &self.segments {
            bytes += vec_bytes(&seg.v)
                + vec_bytes(&seg.gates)
                + vec_bytes(&seg.a2)
                + vec_bytes(&seg.l_hs)
                + vec_bytes(&seg.positions)
                + vec_bytes(&seg.amp);
        }
        bytes += vec_bytes(&self.v_full) + vec_bytes(&self.u_local) + vec_bytes(&self.means);
        // Ghost layers: indexed by global element id, 8 corner vectors each.
        bytes += self.ghost_u.len() as u64 * (DISPLACEMENT_BYTES_PER_ELEMENT + 8);
        bytes
    }

    fn note_memory(&mut self, component: fn(&mut WorkerStats) -> &mut crate::report::ComponentMetrics) {
        let bytes = self.state_bytes();
        let m = component(&mut self.stats);
        m.bytes_high_water = m.bytes_high_water.max(bytes);
        self.stats.total.bytes_high_water = self.stats.total.bytes_high_water.max(bytes);
    }

    fn run(&mut self) -> Result<(), RuntimeError> {
        let schedule = self.shared.schedule;
        let n = schedule.n as u64;
        let k = schedule.k as u64;
        for s in 0..self.shared.coupling_steps {
            let time0: TimeIndex = s as u64 * n * k;
            self.fiber_phase(s, time0)?;
            self.homogenization_phase()?;
            self.equilibrium_phase(s)?;
            self.interpolation_phase(s)?;
            if self.shared.snapshot_steps {
                let _ = self.coordinator.send(Msg::Snapshot {
                    step: s,
                    from: self.rank,
                    state: self.export_segments(),
                });
            }
        }
        Ok(())
    }

    fn export_segments(&self) -> Vec<SegmentState> {
        self.segments
            .iter()
            .map(|seg| SegmentState {
                fiber: seg.fiber,
                start: seg.start,
                v: seg.v.clone(),
                gates: seg.gates.clone(),
                a2: seg.a2.clone(),
                l_hs: seg.l_hs.clone(),
            })
            .collect()
    }

    /// All 1D splitting steps of one coupling step, fiber-major like the
    /// serial loop.
    fn fiber_phase(&mut self, s: usize, time0: TimeIndex) -> Result<(), RuntimeError> {
        let schedule = self.shared.schedule;
        let n = schedule.n as u64;
        let k = schedule.k as u64;
        for si in 0..self.segments.len() {
            for step in 0..n {
                let t0 = time0 + step * k;
                let step1d = s as u64 * n + step;
                match schedule.scheme {
                    Scheme::Godunov => {
                        self.reaction(si, t0, schedule.k, schedule.ode_method)?;
                        self.diffuse(si, step1d)?;
                    }
                    Scheme::Strang => {
                        let half = schedule.k / 2;
                        self.reaction(si, t0, half, OdeMethod::Heun)?;
                        self.diffuse(si, step1d)?;
                        self.reaction(si, t0 + half as u64, half, OdeMethod::Heun)?;
                    }
                }
            }
        }
        self.note_memory(|s| &mut s.solver_0d);
        Ok(())
    }

    fn reaction(
        &mut self,
        si: usize,
        t0: TimeIndex,
        count: u32,
        method: OdeMethod,
    ) -> Result<(), RuntimeError> {
        let t = Instant::now();
        let seg = &mut self.segments[si];
        reaction_substeps(
            &self.shared.params,
            &self.shared.stimulus,
            &seg.amp,
            &self.shared.schedule,
            t0,
            count,
            method,
            &mut seg.v,
            &mut seg.gates,
            &mut seg.a2,
            &mut self.scratch,
        )?;
        self.stats.solver_0d.seconds += t.elapsed().as_secs_f64();
        Ok(())
    }

    fn diffuse(&mut self, si: usize, step1d: u64) -> Result<(), RuntimeError> {
        let t = Instant::now();
        let mut waited = 0.0;
        let seg_len = self.segments[si].len();
        let fiber = self.segments[si].fiber;
        match &self.segments[si].role {
            SegRole::Whole => {
                let seg = &mut self.segments[si];
                self.stepper
                    .as_mut()
                    .expect("stepper present for whole fibers")
                    .step(&mut seg.v)?;
            }
            SegRole::Remote { head } => {
                let head = *head;
                let v = self.segments[si].v.clone();
                self.stats.vm_interface_bytes_sent += v.len() as u64 * VM_BYTES_PER_NODE;
                self.peers[head]
                    .send(Msg::VmGather {
                        step1d,
                        fiber,
                        from: self.rank,
                        v,
                    })
                    .map_err(|_| RuntimeError::Aborted)?;
                let msg = recv_match(&self.rx, &mut self.pending, &mut waited, |m| {
                    matches!(m, Msg::VmScatter { step1d: t, fiber: f, from, .. }
                        if *t == step1d && *f == fiber && *from == head)
                })?;
                if let Msg::VmScatter { v, .. } = msg {
                    if v.len() != seg_len {
                        return Err(RuntimeError::HaloProtocolViolation);
                    }
                    self.segments[si].v.copy_from_slice(&v);
                }
            }
            SegRole::Head { remotes } => {
                let remotes = remotes.clone();
                for &(rank, start, len) in &remotes {
                    let msg = recv_match(&self.rx, &mut self.pending, &mut waited, |m| {
                        matches!(m, Msg::VmGather { step1d: t, fiber: f, from, .. }
                            if *t == step1d && *f == fiber && *from == rank)
                    })?;
                    if let Msg::VmGather { v, .. } = msg {
                        if v.len() != len {
                            return Err(RuntimeError::HaloProtocolViolation);
                        }
                        self.v_full[start..start + len].copy_from_slice(&v);
                    }
                }
                let start = self.segments[si].start;
                self.v_full[start..start + seg_len].copy_from_slice(&self.segments[si].v);
                self.stepper
                    .as_mut()
                    .expect("stepper present for head fibers")
                    .step(&mut self.v_full)?;
                self.segments[si]
                    .v
                    .copy_from_slice(&self.v_full[start..start + seg_len]);
                for &(rank, rstart, rlen) in &remotes {
                    let v = self.v_full[rstart..rstart + rlen].to_vec();
                    self.stats.vm_interface_bytes_sent += v.len() as u64 * VM_BYTES_PER_NODE;
                    self.peers[rank]
                        .send(Msg::VmScatter {
                            step1d,
                            fiber,
                            from: self.rank,
                            v,
                        })
                        .map_err(|_| RuntimeError::Aborted)?;
                }
            }
        }
        self.stats.solver_1d.seconds += t.elapsed().as_secs_f64();
        self.stats.comm_seconds += waited;
        Ok(())
    }

    /// Activation means of the owned elements, ascending element id, each
    /// mean folded over the contained fiber nodes in ascending id order —
    /// the serial operand order.
    fn homogenization_phase(&mut self) -> Result<(), RuntimeError> {
        let t = Instant::now();
        for (slot, &e) in self.owned_elements.iter().enumerate() {
            let contained = &self.shared.map.element_fiber_nodes[e];
            self.means[slot] = if contained.is_empty() {
                0.0
            } else {
                let mut sum = 0.0;
                for &id in contained {
                    let (si, off) = self.fiber_node_slot[&id];
                    let seg = &self.segments[si];
                    sum += gamma_from_a2(seg.a2[off], seg.l_hs[off], &self.shared.params)
                        .map_err(SplittingError::from)?;
                }
                sum / contained.len() as f64
            };
        }
        self.stats.homogenization.seconds += t.elapsed().as_secs_f64();
        self.note_memory(|s| &mut s.homogenization);
        Ok(())
    }

    /// Hand the means to the coordinator and block until the equilibrium
    /// solve returns this partition's nodal displacements.
    fn equilibrium_phase(&mut self, s: usize) -> Result<(), RuntimeError> {
        let t = Instant::now();
        self.coordinator
            .send(Msg::Means {
                step: s,
                from: self.rank,
                means: self.means.clone(),
            })
            .map_err(|_| RuntimeError::Aborted)?;
        let mut waited = 0.0;
        let msg = recv_match(&self.rx, &mut self.pending, &mut waited, |m| {
            matches!(m, Msg::NodalU { step, .. } if *step == s)
        })?;
        if let Msg::NodalU { u, .. } = msg {
            if u.len() != self.local_nodes.len() {
                return Err(RuntimeError::HaloProtocolViolation);
            }
            self.u_local = u;
        }
        self.stats.solver_3d.seconds += t.elapsed().as_secs_f64();
        self.note_memory(|s| &mut s.solver_3d);
        Ok(())
    }

    /// Exchange displacement ghost layers, interpolate deformed fiber-node
    /// positions, and refresh half-sarcomere lengths.
    fn interpolation_phase(&mut self, s: usize) -> Result<(), RuntimeError> {
        let t = Instant::now();
        let mut waited = 0.0;
        let mesh = &self.shared.mesh;

        for (neighbor, ids) in &self.ghost_sends {
            let mut elems = Vec::with_capacity(ids.len());
            for &e in ids {
                let corners = mesh.element_nodes(e);
                let mut du = [[0.0; 3]; 8];
                for (a, &corner) in corners.iter().enumerate() {
                    du[a] = self.u_local[self.node_slot[&corner]];
                }
                elems.push(du);
            }
            self.stats.displacement_bytes_sent +=
                elems.len() as u64 * DISPLACEMENT_BYTES_PER_ELEMENT;
            self.peers[*neighbor]
                .send(Msg::Ghost {
                    step: s,
                    from: self.rank,
                    elems,
                })
                .map_err(|_| RuntimeError::Aborted)?;
        }
        for (neighbor, ids) in &self.ghost_recvs {
            let from = *neighbor;
            let msg = recv_match(&self.rx, &mut self.pending, &mut waited, |m| {
                matches!(m, Msg::Ghost { step, from: f, .. } if *step == s && *f == from)
            })?;
            if let Msg::Ghost { elems, .. } = msg {
                if elems.len() != ids.len() {
                    return Err(RuntimeError::HaloProtocolViolation);
                }
                for (&e, du) in ids.iter().zip(elems) {
                    self.ghost_u.insert(e, du);
                }
            }
        }

        // Deformed positions of owned nodes (owned-element corners) and of
        // the adjacent off-rank nodes (ghost-element corners).
        for si in 0..self.segments.len() {
            for off in 0..self.segments[si].len() {
                let id = self
                    .shared
                    .fibers
                    .node_id(self.segments[si].fiber, self.segments[si].start + off);
                let p = self.interpolate_local(id)?;
                self.segments[si].positions[off] = p;
            }
            let seg_start = self.segments[si].start;
            let seg_end = seg_start + self.segments[si].len();
            let fiber = self.segments[si].fiber;
            let npf = self.shared.fibers.nodes_per_fiber;
            self.segments[si].ext_prev = if seg_start > 0 {
                Some(self.interpolate_ghost(self.shared.fibers.node_id(fiber, seg_start - 1))?)
            } else {
                None
            };
            self.segments[si].ext_next = if seg_end < npf {
                Some(self.interpolate_ghost(self.shared.fibers.node_id(fiber, seg_end))?)
            } else {
                None
            };
        }
        self.refresh_l_hs()?;

        self.stats.interpolation.seconds += t.elapsed().as_secs_f64();
        self.stats.comm_seconds += waited;
        self.note_memory(|s| &mut s.interpolation);
        Ok(())
    }

    /// Trilinear interpolation of `X + u` at a fiber node inside an owned
    /// element.
    fn interpolate_local(&self, id: usize) -> Result<[f64; 3], RuntimeError> {
        let mesh = &self.shared.mesh;
        let e = self.shared.map.node_element[id];
        let weights = shape_values(&self.shared.map.node_xi[id]);
        let corners = mesh.element_nodes(e);
        let mut p = [0.0; 3];
        for (a, &corner) in corners.iter().enumerate() {
            let x = mesh.node_coords[corner];
            let du = self.u_local[*self
                .node_slot
                .get(&corner)
                .ok_or(RuntimeError::HaloProtocolViolation)?];
            for d in 0..3 {
                p[d] += weights[a] * (x[d] + du[d]);
            }
        }
        Ok(p)
    }

    /// The same interpolation for a node owned by a neighbor, using the
    /// ghost layer's corner displacements.
    fn interpolate_ghost(&self, id: usize) -> Result<[f64; 3], RuntimeError> {
        let mesh = &self.shared.mesh;
        let e = self.shared.map.node_element[id];
        let du8 = self
            .ghost_u
            .get(&e)
            .ok_or(RuntimeError::HaloProtocolViolation)?;
        let weights = shape_values(&self.shared.map.node_xi[id]);
        let corners = mesh.element_nodes(e);
        let mut p = [0.0; 3];
        for (a, &corner) in corners.iter().enumerate() {
            let x = mesh.node_coords[corner];
            let du = du8[a];
            for d in 0..3 {
                p[d] += weights[a] * (x[d] + du[d]);
            }
        }
        Ok(p)
    }

    /// Half-sarcomere lengths of the owned nodes: central differences of the
    /// deformed positions over the reference spacing, one-sided at fiber
    /// ends — the serial formulas on the same operands.
    fn refresh_l_hs(&mut self) -> Result<(), RuntimeError> {
        let dist = |a: &[f64; 3], b: &[f64; 3]| -> f64 {
            let dx = a[0] - b[0];
            let dy = a[1] - b[1];
            let dz = a[2] - b[2];
            (dx * dx + dy * dy + dz * dz).sqrt()
        };
        let npf = self.shared.fibers.nodes_per_fiber;
        let h = self.shared.node_spacing;
        let l_opt = self.shared.params.l_opt;
        for seg in &mut self.segments {
            let len = seg.v.len();
            let at = |off: isize, seg: &Segment| -> Result<[f64; 3], RuntimeError> {
                if off < 0 {
                    seg.ext_prev.ok_or(RuntimeError::HaloProtocolViolation)
                } else if off as usize >= len {
                    seg.ext_next.ok_or(RuntimeError::HaloProtocolViolation)
                } else {
                    Ok(seg.positions[off as usize])
                }
            };
            for off in 0..len {
                let j = seg.start + off;
                let o = off as isize;
                let stretch = if j == 0 {
                    dist(&at(1, seg)?, &at(0, seg)?) / h
                } else if j == npf - 1 {
                    dist(&at(o, seg)?, &at(o - 1, seg)?) / h
                } else {
                    dist(&at(o + 1, seg)?, &at(o - 1, seg)?) / (2.0 * h)
                };
                if !(stretch > 0.0) || !stretch.is_finite() {
                    return Err(SplittingError::from(TransferError::DegenerateSegment).into());
                }
                seg.l_hs[off] = l_opt * stretch;
            }
        }
        Ok(())
    }

    fn finish(mut self) {
        let state: Vec<SegmentState> = self
            .segments
            .drain(..)
            .map(|seg| SegmentState {
                fiber: seg.fiber,
                start: seg.start,
                v: seg.v,
                gates: seg.gates,
                a2: seg.a2,
                l_hs: seg.l_hs,
            })
            .collect();
        let _ = self.coordinator.send(Msg::Done {
            from: self.rank,
            stats: Box::new(self.stats),
            state,
        });
    }
}

fn worker_main<M: MembraneModel + Clone>(ctx: WorkerCtx<M>) {
    let rank = ctx.setup.rank;
    let coordinator = ctx.coordinator.clone();
    let started = Instant::now();
    match Worker::build(ctx) {
        Ok(mut worker) => match worker.run() {
            Ok(()) => {
                worker.stats.total.seconds = started.elapsed().as_secs_f64();
                worker.finish();
            }
            Err(e) => {
                let _ = coordinator.send(Msg::Failed {
                    from: rank,
                    message: e.to_string(),
                });
            }
        },
        Err(e) => {
            let _ = coordinator.send(Msg::Failed {
                from: rank,
                message: e.to_string(),
            });
        }
    }
}

// ---------------------------------------------------------------------------
// Setup and the coordinator.

/// Ascending global ids of the elements in one partition box.
fn owned_element_ids(mesh: &MuscleMesh, b: [[usize; 2]; 3]) -> Vec<usize> {
    let mut ids = Vec::new();
    for ez in b[2][0]..b[2][1] {
        for ey in b[1][0]..b[1][1] {
            for ex in b[0][0]..b[0][1] {
                ids.push(mesh.element_index(ex, ey, ez));
            }
        }
    }
    ids
}

fn build_setups<M: MembraneModel + Clone>(
    scenario: &CoupledScenario<M>,
    layout: &PartitionLayout,
    map: &EmbeddingMap,
    plan: &HaloPlan,
) -> Result<(Vec<WorkerSetup>, Vec<usize>), RuntimeError> {
    let mesh = &scenario.mesh;
    let fibers = scenario.fibers;
    let npf = fibers.nodes_per_fiber;
    let p = layout.n_partitions();
    let amp_full = stimulus_amplitudes(&scenario.stimulus, npf)?;
    let rest = FiberState::resting(&scenario.params, npf);
    let gc = rest.gate_count;

    let mut setups: Vec<WorkerSetup> = (0..p)
        .map(|rank| {
            let filter = |list: &[crate::halo::HaloTransfer]| {
                list.iter()
                    .filter(|t| t.kind == PayloadKind::Displacement)
                    .map(|t| (t.neighbor, t.indices.clone()))
                    .collect::<Vec<_>>()
            };
            let owned = owned_element_ids(mesh, layout.partition_box(rank));
            let mut corner_set = BTreeSet::new();
            for &e in &owned {
                for n in mesh.element_nodes(e) {
                    corner_set.insert(n);
                }
            }
            WorkerSetup {
                rank,
                owned_elements: owned,
                local_nodes: corner_set.into_iter().collect(),
                segments: Vec::new(),
                ghost_sends: filter(&plan.sends[rank]),
                ghost_recvs: filter(&plan.recvs[rank]),
                needs_stepper: false,
            }
        })
        .collect();

    // Contiguous ownership runs along each fiber become worker segments.
    let mut fiber_heads = Vec::with_capacity(fibers.n_fibers());
    for fiber in 0..fibers.n_fibers() {
        let mut runs: Vec<(usize, usize, usize)> = Vec::new(); // (owner, start, len)
        for node in 0..npf {
            let id = fibers.node_id(fiber, node);
            let owner = layout.owner_of(mesh.element_grid_pos(map.node_element[id]));
            match runs.last_mut() {
                Some((o, _, len)) if *o == owner => *len += 1,
                _ => runs.push((owner, node, 1)),
            }
        }
        let owners: BTreeSet<usize> = runs.iter().map(|&(o, _, _)| o).collect();
        if owners.len() != runs.len() {
            return Err(RuntimeError::ShapeMismatch(
                "fiber ownership is not contiguous along the fiber",
            ));
        }
        let head = *owners.iter().next().unwrap();
        fiber_heads.push(head);
        for &(owner, start, len) in &runs {
            let role = if runs.len() == 1 {
                SegRole::Whole
            } else if owner == head {
                SegRole::Head {
                    remotes: runs
                        .iter()
                        .filter(|&&(o, _, _)| o != owner)
                        .map(|&(o, s, l)| (o, s, l))
                        .collect(),
                }
            } else {
                SegRole::Remote { head }
            };
            if matches!(role, SegRole::Whole | SegRole::Head { .. }) {
                setups[owner].needs_stepper = true;
            }
            setups[owner].segments.push(Segment {
                fiber,
                start,
                role,
                v: rest.v[start..start + len].to_vec(),
                gates: rest.gates[start * gc..(start + len) * gc].to_vec(),
                a2: rest.a2[start..start + len].to_vec(),
                l_hs: vec![scenario.params.l_opt; len],
                positions: vec![[0.0; 3]; len],
                ext_prev: None,
                ext_next: None,
                amp: amp_full[start..start + len].to_vec(),
            });
        }
    }
    Ok((setups, fiber_heads))
}

/// Deterministic assembly of the global state, keyed by fiber and node ids
/// rather than arrival order.
fn assemble_world<M: MembraneModel + Clone>(
    scenario: &CoupledScenario<M>,
    owned_elements: &[Vec<usize>],
    gamma_means: &[Vec<f64>],
    segments: &[Vec<SegmentState>],
    displacement: DisplacementField,
    time: TimeIndex,
) -> WorldState {
    let npf = scenario.fibers.nodes_per_fiber;
    let gc = scenario.params.membrane.gate_count();
    let mut fibers_out: Vec<FiberState> = (0..scenario.fibers.n_fibers())
        .map(|_| FiberState {
            v: vec![0.0; npf],
            gates: vec![0.0; npf * gc],
            a2: vec![0.0; npf],
            gate_count: gc,
        })
        .collect();
    let mut l_hs = vec![0.0; scenario.fibers.n_nodes()];
    let mut gamma_bar = vec![0.0; scenario.mesh.n_elements() * 8];
    for (rank, means) in gamma_means.iter().enumerate() {
        for (&e, &m) in owned_elements[rank].iter().zip(means) {
            gamma_bar[e * 8..(e + 1) * 8].fill(m);
        }
    }
    for segs in segments {
        for seg in segs {
            let f = &mut fibers_out[seg.fiber];
            f.v[seg.start..seg.start + seg.v.len()].copy_from_slice(&seg.v);
            f.gates[seg.start * gc..seg.start * gc + seg.gates.len()]
                .copy_from_slice(&seg.gates);
            f.a2[seg.start..seg.start + seg.a2.len()].copy_from_slice(&seg.a2);
            let base = scenario.fibers.node_id(seg.fiber, seg.start);
            l_hs[base..base + seg.l_hs.len()].copy_from_slice(&seg.l_hs);
        }
    }
    WorldState {
        fibers: fibers_out,
        displacement,
        l_hs,
        gamma_bar,
        time,
    }
}

/// Run the coupled scenario on one worker thread per partition, coordinated
/// by the calling thread. The assembled end state matches the serial loop
/// bitwise on any layout.
pub fn run_parallel<M: MembraneModel + Clone + Send + Sync>(
    scenario: &CoupledScenario<M>,
    layout: &PartitionLayout,
    coupling_steps: usize,
) -> Result<ParallelOutcome, RuntimeError> {
    run_parallel_impl(scenario, layout, coupling_steps, None)
}

/// [`run_parallel`] plus a trajectory observer: after every coupling step the
/// coordinator assembles the global state and calls `observer(step, world)`.
/// Observation does not change the computed trajectory.
pub fn run_parallel_recorded<M: MembraneModel + Clone + Send + Sync>(
    scenario: &CoupledScenario<M>,
    layout: &PartitionLayout,
    coupling_steps: usize,
    observer: &mut dyn FnMut(usize, &WorldState),
) -> Result<ParallelOutcome, RuntimeError> {
    run_parallel_impl(scenario, layout, coupling_steps, Some(observer))
}

fn run_parallel_impl<M: MembraneModel + Clone + Send + Sync>(
    scenario: &CoupledScenario<M>,
    layout: &PartitionLayout,
    coupling_steps: usize,
    observer: Option<&mut dyn FnMut(usize, &WorldState)>,
) -> Result<ParallelOutcome, RuntimeError> {
    layout.validate()?;
    if layout.domain != scenario.mesh.dims {
        return Err(RuntimeError::ShapeMismatch(
            "partition domain differs from the mesh",
        ));
    }
    // The serial constructor owns all cross-field validation; reuse it.
    drop(scenario.serial()?);

    let mesh = Arc::new(scenario.mesh.clone());
    let map = Arc::new(build_embedding(&mesh, &scenario.fibers).map_err(SplittingError::from)?);
    let plan = build_halo_plan(layout, &mesh, &scenario.fibers, &map)?;
    plan.validate()?;
    let (setups, fiber_workers) = build_setups(scenario, layout, &map, &plan)?;
    let p = layout.n_partitions();

    let shared = Arc::new(Shared {
        schedule: scenario.schedule,
        params: scenario.params.clone(),
        stimulus: scenario.stimulus.clone(),
        fiber_mesh: scenario.fiber_mesh.clone(),
        mesh: Arc::clone(&mesh),
        map: Arc::clone(&map),
        fibers: scenario.fibers,
        node_spacing: scenario.fibers.node_spacing(&mesh),
        coupling_steps,
        snapshot_steps: observer.is_some(),
    });

    let mut worker_txs = Vec::with_capacity(p);
    let mut worker_rxs = Vec::with_capacity(p);
    for _ in 0..p {
        let (tx, rx) = channel::<Msg>();
        worker_txs.push(tx);
        worker_rxs.push(Some(rx));
    }
    let (coord_tx, coord_rx) = channel::<Msg>();

    // Per-worker element and node lists, kept for the coordinator's
    // deterministic assembly.
    let owned_elements: Vec<Vec<usize>> =
        setups.iter().map(|s| s.owned_elements.clone()).collect();
    let local_nodes: Vec<Vec<usize>> = setups.iter().map(|s| s.local_nodes.clone()).collect();

    let coordinator_result = std::thread::scope(|scope| {
        for setup in setups {
            let ctx = WorkerCtx {
                rx: worker_rxs[setup.rank].take().unwrap(),
                peers: worker_txs.clone(),
                coordinator: coord_tx.clone(),
                shared: Arc::clone(&shared),
                setup,
            };
            scope.spawn(move || worker_main(ctx));
        }
        coordinate(
            scenario,
            &mesh,
            &owned_elements,
            &local_nodes,
            &worker_txs,
            &coord_rx,
            coupling_steps,
            p,
            observer,
        )
    });
    let (displacement, stats, states, newton_iterations) = coordinator_result?;

    let schedule = scenario.schedule;
    let world = assemble_world(
        scenario,
        &owned_elements,
        &states.gamma_means,
        &states.segments,
        displacement,
        coupling_steps as u64 * schedule.n as u64 * schedule.k as u64,
    );
    let elements_per_worker = owned_elements.iter().map(Vec::len).collect();
    Ok(ParallelOutcome {
        world,
        report: TimingReport { workers: stats },
        plan,
        newton_iterations,
        elements_per_worker,
        fiber_workers,
    })
}

/// Final per-rank payloads the coordinator keeps for assembly.
struct FinalStates {
    segments: Vec<Vec<SegmentState>>,
    gamma_means: Vec<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
fn coordinate<M: MembraneModel + Clone>(
    scenario: &CoupledScenario<M>,
    mesh: &MuscleMesh,
    owned_elements: &[Vec<usize>],
    local_nodes: &[Vec<usize>],
    worker_txs: &[Sender<Msg>],
    rx: &Receiver<Msg>,
    coupling_steps: usize,
    p: usize,
    mut observer: Option<&mut dyn FnMut(usize, &WorldState)>,
) -> Result<(DisplacementField, Vec<WorkerStats>, FinalStates, Vec<usize>), RuntimeError> {
    let mut pending = VecDeque::new();
    let mut waited = 0.0;
    let mut displacement = DisplacementField::zeros(mesh);
    let mut gamma_bar = vec![0.0; mesh.n_elements() * 8];
    let mut gamma_means: Vec<Vec<f64>> = vec![Vec::new(); p];
    let mut newton_iterations = Vec::with_capacity(coupling_steps);

    type CoordOk = (DisplacementField, Vec<WorkerStats>, FinalStates, Vec<usize>);
    let abort_run = |pending: &mut VecDeque<Msg>,
                     first: Option<(usize, String)>|
     -> Result<CoordOk, RuntimeError> {
        for tx in worker_txs {
            let _ = tx.send(Msg::Abort);
        }
        // Every worker ends with exactly one terminal message; drain them so
        // the scope can join.
        let mut failure = first;
        let mut terminals = pending
            .iter()
            .filter(|m| matches!(m, Msg::Done { .. } | Msg::Failed { .. }))
            .count();
        for m in pending.drain(..) {
            if let Msg::Failed { from, message } = m {
                note_failure(&mut failure, from, message);
            }
        }
        while terminals < p {
            match rx.recv() {
                Ok(Msg::Done { .. }) => terminals += 1,
                Ok(Msg::Failed { from, message }) => {
                    terminals += 1;
                    note_failure(&mut failure, from, message);
                }
                Ok(_) => {}
                Err(_) => break,
            }
        }
        let (rank, message) = failure.expect("abort without a recorded failure");
        Err(RuntimeError::WorkerFailed { rank, message })
    };

    for s in 0..coupling_steps {
        for _ in 0..p {
            let msg = recv_match(rx, &mut pending, &mut waited, |m| {
                matches!(m, Msg::Means { step, .. } if *step == s)
                    || matches!(m, Msg::Failed { .. })
            });
            match msg {
                Ok(Msg::Means { from, means, .. }) => {
                    for (&e, &m) in owned_elements[from].iter().zip(&means) {
                        gamma_bar[e * 8..(e + 1) * 8].fill(m);
                    }
                    gamma_means[from] = means;
                }
                Ok(Msg::Failed { from, message }) => {
                    return abort_run(&mut pending, Some((from, message)));
                }
                Ok(_) => unreachable!("predicate admits only means and failures"),
                Err(_) => {
                    return abort_run(&mut pending, None);
                }
            }
        }
        let solution = match newton_solve(
            &displacement,
            &gamma_bar,
            mesh,
            &scenario.material,
            &scenario.newton,
        ) {
            Ok(s) => s,
            Err(e) => {
                let _ = abort_run(&mut pending, Some((usize::MAX, String::new())));
                return Err(RuntimeError::Simulation(e.into()));
            }
        };
        displacement = solution.u;
        newton_iterations.push(solution.iterations);
        for (rank, tx) in worker_txs.iter().enumerate() {
            let u = local_nodes[rank].iter().map(|&n| displacement.u[n]).collect();
            if tx.send(Msg::NodalU { step: s, u }).is_err() {
                return abort_run(&mut pending, None);
            }
        }
        if let Some(cb) = observer.as_mut() {
            let mut snaps: Vec<Vec<SegmentState>> = (0..p).map(|_| Vec::new()).collect();
            for _ in 0..p {
                let msg = recv_match(rx, &mut pending, &mut waited, |m| {
                    matches!(m, Msg::Snapshot { step, .. } if *step == s)
                        || matches!(m, Msg::Failed { .. })
                });
                match msg {
                    Ok(Msg::Snapshot { from, state, .. }) => snaps[from] = state,
                    Ok(Msg::Failed { from, message }) => {
                        return abort_run(&mut pending, Some((from, message)));
                    }
                    Ok(_) => unreachable!("predicate admits only snapshots and failures"),
                    Err(_) => return abort_run(&mut pending, None),
                }
            }
            let schedule = scenario.schedule;
            let world = assemble_world(
                scenario,
                owned_elements,
                &gamma_means,
                &snaps,
                displacement.clone(),
                (s as u64 + 1) * schedule.n as u64 * schedule.k as u64,
            );
            cb(s, &world);
        }
    }

    let mut stats: Vec<Option<WorkerStats>> = (0..p).map(|_| None).collect();
    let mut segments: Vec<Vec<SegmentState>> = (0..p).map(|_| Vec::new()).collect();
    for _ in 0..p {
        let msg = recv_match(rx, &mut pending, &mut waited, |m| {
            matches!(m, Msg::Done { .. } | Msg::Failed { .. })
        });
        match msg {
            Ok(Msg::Done { from, stats: st, state }) => {
                stats[from] = Some(*st);
                segments[from] = state;
            }
            Ok(Msg::Failed { from, message }) => {
                return abort_run(&mut pending, Some((from, message)));
            }
            _ => return abort_run(&mut pending, None),
        }
    }
    let stats: Vec<WorkerStats> = stats
        .into_iter()
        .map(|s| s.expect("every rank reported"))
        .collect();
    Ok((
        displacement,
        stats,
        FinalStates {
            segments,
            gamma_means,
        },
        newton_iterations,
    ))
}

/// Keep the first real failure; peer-abort echoes only fill a void.
fn note_failure(failure: &mut Option<(usize, String)>, from: usize, message: String) {
    let echo = message == RuntimeError::Aborted.to_string();
    match failure {
        None => *failure = Some((from, message)),
        Some((_, m)) if *m == RuntimeError::Aborted.to_string() && !echo => {
            *failure = Some((from, message))
        }
        _ => {}
    }
}
