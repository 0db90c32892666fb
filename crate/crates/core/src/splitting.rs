//! Operator splitting of the fiber reaction–diffusion dynamics and the outer
//! coupling loop.
//!
//! The time hierarchy has three levels: `dt_3d = n·dt_1d` (mechanics),
//! `dt_1d = k·dt_0d` (diffusion), `dt_0d` (membrane kinetics). Time is
//! carried as an integer count of `dt_0d` quanta so hand-off instants are
//! exact. Two splittings are provided:
//!
//! * Godunov (first order): `k` explicit ODE sub-steps, then one implicit
//!   diffusion step of length `dt_1d`.
//! * Strang (second order): `k/2` Heun sub-steps, one Crank–Nicolson
//!   diffusion step of length `dt_1d`, then `k/2` Heun sub-steps.
//!
//! The membrane potential is handed between the reaction and diffusion parts
//! in place, so each part always starts from the other's latest output.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cell::{
    euler_substep, gamma_from_a2, heun_substep, CellError, CellParams, CellState, HeunScratch,
    HodgkinHuxley, MembraneModel, StimulusProtocol,
};
use crate::fiber::{DiffusionStepper, FiberError, FiberMesh};
use crate::mechanics::{
    newton_solve, DisplacementField, MaterialParams, MechanicsError, MuscleMesh, NewtonOptions,
};
use crate::transfer::{
    build_embedding, half_sarcomere_lengths, homogenize_gamma, interpolate_positions,
    EmbeddingMap, FiberLayout, TransferError,
};

/// Time as an integer number of `dt_0d` quanta since simulation start.
pub type TimeIndex = u64;

#[derive(Debug, Error, PartialEq)]
pub enum SplittingError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(&'static str),
    #[error("stimulus target outside fiber")]
    StimulusTargetOutsideFiber,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(&'static str),
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error(transparent)]
    Fiber(#[from] FiberError),
    #[error(transparent)]
    Mechanics(#[from] MechanicsError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Godunov,
    Strang,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OdeMethod {
    Euler,
    Heun,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionMethod {
    ImplicitEuler,
    CrankNicolson,
}

/// The three-level time hierarchy. `dt_1d` and `dt_3d` are derived from
/// `dt_0d` and the integer multipliers, so the exact-multiple invariants hold
/// by construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplittingSchedule {
    /// Membrane-kinetics sub-step, ms.
    pub dt_0d: f64,
    /// ODE sub-steps per diffusion step: `dt_1d = k·dt_0d`.
    pub k: u32,
    /// Diffusion steps per mechanics step: `dt_3d = n·dt_1d`.
    pub n: u32,
    pub scheme: Scheme,
    pub ode_method: OdeMethod,
    pub diffusion_method: DiffusionMethod,
}

impl SplittingSchedule {
    /// Production defaults per scheme: Godunov at `dt_1d` = 0.5 µs with
    /// k = 5 Euler sub-steps; Strang at `dt_1d` = 2 µs with k = 2 Heun
    /// sub-steps. Both advance mechanics every 1 ms.
    pub fn default_for(scheme: Scheme) -> Self {
        match scheme {
            Scheme::Godunov => Self {
                dt_0d: 1e-4,
                k: 5,
                n: 2000,
                scheme,
                ode_method: OdeMethod::Euler,
                diffusion_method: DiffusionMethod::ImplicitEuler,
            },
            Scheme::Strang => Self {
                dt_0d: 1e-3,
                k: 2,
                n: 500,
                scheme,
                ode_method: OdeMethod::Heun,
                diffusion_method: DiffusionMethod::CrankNicolson,
            },
        }
    }

    /// Builds a schedule from the three step sizes, requiring the ratios to
    /// be integers (to within 1e-9 relative).
    pub fn from_dts(
        dt_3d: f64,
        dt_1d: f64,
        dt_0d: f64,
        scheme: Scheme,
        ode_method: OdeMethod,
        diffusion_method: DiffusionMethod,
    ) -> Result<Self, SplittingError> {
        if !(dt_0d > 0.0 && dt_1d > 0.0 && dt_3d > 0.0) {
            return Err(SplittingError::InvalidSchedule(
                "step sizes must be positive",
            ));
        }
        let k = (dt_1d / dt_0d).round();
        let n = (dt_3d / dt_1d).round();
        if k < 1.0 || (k * dt_0d - dt_1d).abs() > 1e-9 * dt_1d {
            return Err(SplittingError::InvalidSchedule(
                "dt_1d must be an integer multiple of dt_0d",
            ));
        }
        if n < 1.0 || (n * dt_1d - dt_3d).abs() > 1e-9 * dt_3d {
            return Err(SplittingError::InvalidSchedule(
                "dt_3d must be an integer multiple of dt_1d",
            ));
        }
        let schedule = Self {
            dt_0d,
            k: k as u32,
            n: n as u32,
            scheme,
            ode_method,
            diffusion_method,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn validate(&self) -> Result<(), SplittingError> {
        if !(self.dt_0d > 0.0 && self.dt_0d.is_finite()) {
            return Err(SplittingError::InvalidSchedule("dt_0d must be positive"));
        }
        if self.k == 0 || self.n == 0 {
            return Err(SplittingError::InvalidSchedule(
                "k and n must be positive integers",
            ));
        }
        if self.scheme == Scheme::Strang && self.k % 2 != 0 {
            return Err(SplittingError::InvalidSchedule(
                "strang splitting requires an even k",
            ));
        }
        Ok(())
    }

    pub fn dt_1d(&self) -> f64 {
        self.k as f64 * self.dt_0d
    }

    pub fn dt_3d(&self) -> f64 {
        (self.n as u64 * self.k as u64) as f64 * self.dt_0d
    }

    /// Wall-clock time of a quantum index, ms.
    pub fn time_ms(&self, t: TimeIndex) -> f64 {
        t as f64 * self.dt_0d
    }
}

/// Nodal state of one fiber: membrane potential plus the per-node cell state,
/// stored as flat arrays (gates node-major) for the sweep kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct FiberState {
    /// Membrane potential per node, mV.
    pub v: Vec<f64>,
    /// Gating variables, `gate_count` per node, node-major.
    pub gates: Vec<f64>,
    /// Cross-bridge surrogate per node.
    pub a2: Vec<f64>,
    /// Gates per node.
    pub gate_count: usize,
}

impl FiberState {
    /// Every node at the membrane model's resting fixed point.
    pub fn resting<M: MembraneModel>(params: &CellParams<M>, n_nodes: usize) -> Self {
        let rest = params.resting_state();
        let mut gates = Vec::with_capacity(n_nodes * rest.gates.len());
        for _ in 0..n_nodes {
            gates.extend_from_slice(&rest.gates);
        }
        Self {
            v: vec![rest.v_m; n_nodes],
            gates,
            a2: vec![rest.a2; n_nodes],
            gate_count: rest.gates.len(),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.v.len()
    }

    pub fn node_state(&self, i: usize) -> CellState {
        CellState {
            v_m: self.v[i],
            gates: self.gates[i * self.gate_count..(i + 1) * self.gate_count].to_vec(),
            a2: self.a2[i],
        }
    }

    pub fn set_node_state(&mut self, i: usize, state: &CellState) {
        self.v[i] = state.v_m;
        self.gates[i * self.gate_count..(i + 1) * self.gate_count].copy_from_slice(&state.gates);
        self.a2[i] = state.a2;
    }

    pub fn validate(&self) -> Result<(), SplittingError> {
        let n = self.v.len();
        if self.a2.len() != n || self.gates.len() != n * self.gate_count {
            return Err(SplittingError::InvalidSchedule(
                "fiber state arrays have inconsistent lengths",
            ));
        }
        Ok(())
    }
}

/// Scratch buffers for [`reaction_substeps`], sized to the membrane model's
/// gate count.
#[derive(Debug, Clone)]
pub struct ReactionScratch {
    dgates: Vec<f64>,
    heun: HeunScratch,
}

impl ReactionScratch {
    pub fn new(gate_count: usize) -> Self {
        Self {
            dgates: vec![0.0; gate_count],
            heun: HeunScratch::new(gate_count),
        }
    }
}

/// Per-node stimulus amplitudes: `stimulus.amplitude` on target nodes, zero
/// elsewhere.
pub fn stimulus_amplitudes(
    stimulus: &StimulusProtocol,
    n_nodes: usize,
) -> Result<Vec<f64>, SplittingError> {
    let mut amp = vec![0.0; n_nodes];
    for &node in &stimulus.target {
        if node >= n_nodes {
            return Err(SplittingError::StimulusTargetOutsideFiber);
        }
        amp[node] = stimulus.amplitude;
    }
    Ok(amp)
}

/// Factored diffusion stepper matching a schedule's scheme and diffusion
/// method at `dt_1d`.
pub fn build_diffusion_stepper(
    schedule: &SplittingSchedule,
    mesh: &FiberMesh,
) -> Result<DiffusionStepper, SplittingError> {
    let dt_1d = schedule.dt_1d();
    Ok(match (schedule.scheme, schedule.diffusion_method) {
        (Scheme::Strang, _) | (_, DiffusionMethod::CrankNicolson) => {
            DiffusionStepper::crank_nicolson(mesh, dt_1d)?
        }
        (_, DiffusionMethod::ImplicitEuler) => DiffusionStepper::implicit_euler(mesh, dt_1d)?,
    })
}

/// `count` membrane-kinetics sub-steps on a contiguous run of fiber nodes,
/// starting at quantum index `t0`. `v`, `a2`, and `amp` hold one entry per
/// node; `gates` is node-major. The stimulus is sampled at each sub-step's
/// start time and held constant across the sub-step. Node states are
/// independent here, so a fiber may be advanced in contiguous pieces with
/// results identical to advancing it whole.
#[allow(clippy::too_many_arguments)]
pub fn reaction_substeps<M: MembraneModel>(
    params: &CellParams<M>,
    stimulus: &StimulusProtocol,
    amp: &[f64],
    schedule: &SplittingSchedule,
    t0: TimeIndex,
    count: u32,
    method: OdeMethod,
    v: &mut [f64],
    gates: &mut [f64],
    a2: &mut [f64],
    scratch: &mut ReactionScratch,
) -> Result<(), SplittingError> {
    let n = v.len();
    let gc = params.membrane.gate_count();
    if a2.len() != n || amp.len() != n || gates.len() != n * gc {
        return Err(SplittingError::ShapeMismatch("node arrays disagree"));
    }
    let dt = schedule.dt_0d;
    for j in 0..count as u64 {
        let on = stimulus.is_on(schedule.time_ms(t0 + j));
        for i in 0..n {
            let i_stim = if on { amp[i] } else { 0.0 };
            let g = &mut gates[i * gc..(i + 1) * gc];
            match method {
                OdeMethod::Euler => euler_substep(
                    params,
                    dt,
                    i_stim,
                    &mut v[i],
                    g,
                    &mut a2[i],
                    &mut scratch.dgates,
                )?,
                OdeMethod::Heun => heun_substep(
                    params,
                    dt,
                    i_stim,
                    &mut v[i],
                    g,
                    &mut a2[i],
                    &mut scratch.heun,
                )?,
            }
        }
    }
    Ok(())
}

/// Reusable integrator for one fiber: owns the factored diffusion stepper,
/// the per-node stimulus amplitudes, and the ODE scratch buffers.
pub struct FiberIntegrator<M: MembraneModel = HodgkinHuxley> {
    schedule: SplittingSchedule,
    params: CellParams<M>,
    stimulus: StimulusProtocol,
    /// Per-node stimulus amplitude (zero off-target).
    amp: Vec<f64>,
    diffusion: DiffusionStepper,
    scratch: ReactionScratch,
}

impl<M: MembraneModel> FiberIntegrator<M>
where
    M: Clone,
{
    pub fn new(
        schedule: &SplittingSchedule,
        mesh: &FiberMesh,
        params: &CellParams<M>,
        stimulus: &StimulusProtocol,
    ) -> Result<Self, SplittingError> {
        schedule.validate()?;
        params.validate()?;
        stimulus.validate()?;
        mesh.validate()?;
        let amp = stimulus_amplitudes(stimulus, mesh.n_nodes())?;
        let diffusion = build_diffusion_stepper(schedule, mesh)?;
        Ok(Self {
            schedule: *schedule,
            params: params.clone(),
            stimulus: stimulus.clone(),
            amp,
            diffusion,
            scratch: ReactionScratch::new(params.membrane.gate_count()),
        })
    }

    pub fn schedule(&self) -> &SplittingSchedule {
        &self.schedule
    }

    pub fn params(&self) -> &CellParams<M> {
        &self.params
    }

    /// `count` membrane-kinetics sub-steps on every node, starting at quantum
    /// index `t0`.
    fn ode_block(
        &mut self,
        state: &mut FiberState,
        t0: TimeIndex,
        count: u32,
        method: OdeMethod,
    ) -> Result<(), SplittingError> {
        reaction_substeps(
            &self.params,
            &self.stimulus,
            &self.amp,
            &self.schedule,
            t0,
            count,
            method,
            &mut state.v,
            &mut state.gates,
            &mut state.a2,
            &mut self.scratch,
        )
    }

    /// One `dt_1d` step with the schedule's scheme, starting at quantum `t0`.
    pub fn step_1d(&mut self, state: &mut FiberState, t0: TimeIndex) -> Result<(), SplittingError> {
        state.validate()?;
        match self.schedule.scheme {
            Scheme::Godunov => {
                let k = self.schedule.k;
                self.ode_block(state, t0, k, self.schedule.ode_method)?;
                self.diffusion.step(&mut state.v)?;
            }
            Scheme::Strang => {
                let half = self.schedule.k / 2;
                self.ode_block(state, t0, half, OdeMethod::Heun)?;
                self.diffusion.step(&mut state.v)?;
                self.ode_block(state, t0 + half as u64, half, OdeMethod::Heun)?;
            }
        }
        Ok(())
    }
}

/// One Godunov step: `k` ODE sub-steps, then one implicit diffusion step.
pub fn godunov_1d_step(
    state: &mut FiberState,
    t0: TimeIndex,
    schedule: &SplittingSchedule,
    mesh: &FiberMesh,
    params: &CellParams,
    stimulus: &StimulusProtocol,
) -> Result<(), SplittingError> {
    if schedule.scheme != Scheme::Godunov {
        return Err(SplittingError::InvalidSchedule("scheme must be godunov"));
    }
    FiberIntegrator::new(schedule, mesh, params, stimulus)?.step_1d(state, t0)
}

/// One Strang step: `k/2` Heun sub-steps, one Crank–Nicolson diffusion step,
/// `k/2` Heun sub-steps.
pub fn strang_1d_step(
    state: &mut FiberState,
    t0: TimeIndex,
    schedule: &SplittingSchedule,
    mesh: &FiberMesh,
    params: &CellParams,
    stimulus: &StimulusProtocol,
) -> Result<(), SplittingError> {
    if schedule.scheme != Scheme::Strang {
        return Err(SplittingError::InvalidSchedule("scheme must be strang"));
    }
    FiberIntegrator::new(schedule, mesh, params, stimulus)?.step_1d(state, t0)
}

/// Accuracy probe shared by the tests and the convergence study: a 31-node,
/// 1 cm fiber stimulated at its midpoint with 1200 µA/cm² on [0, 0.1) ms.
/// Returns the stimulated node's membrane potential at `t_end`.
pub fn probe_stimulated_potential(
    scheme: Scheme,
    dt_1d: f64,
    k: u32,
    t_end: f64,
) -> Result<f64, SplittingError> {
    let n_nodes = 31;
    let mid = 15;
    let params = CellParams::<HodgkinHuxley>::default().calibrate_resting_offset();
    let mesh = FiberMesh::uniform(n_nodes, 1.0, 3.828, 500.0, 1.0);
    let stimulus = StimulusProtocol {
        amplitude: 1200.0,
        t_on: 0.0,
        t_off: 0.1,
        target: vec![mid],
    };
    let (ode_method, diffusion_method) = match scheme {
        Scheme::Godunov => (OdeMethod::Euler, DiffusionMethod::ImplicitEuler),
        Scheme::Strang => (OdeMethod::Heun, DiffusionMethod::CrankNicolson),
    };
    let schedule = SplittingSchedule {
        dt_0d: dt_1d / k as f64,
        k,
        n: 1,
        scheme,
        ode_method,
        diffusion_method,
    };
    let mut integrator = FiberIntegrator::new(&schedule, &mesh, &params, &stimulus)?;
    let mut state = FiberState::resting(&params, n_nodes);
    let steps = (t_end / dt_1d).round() as u64;
    for s in 0..steps {
        integrator.step_1d(&mut state, s * k as u64)?;
    }
    Ok(state.v[mid])
}

/// Everything that evolves over a coupled run.
#[derive(Debug, Clone)]
pub struct WorldState {
    /// One electrophysiology state per fiber.
    pub fibers: Vec<FiberState>,
    /// 3D nodal displacements.
    pub displacement: DisplacementField,
    /// Half-sarcomere length per fiber node, µm.
    pub l_hs: Vec<f64>,
    /// Latest homogenized activation per 3D Gauss slot.
    pub gamma_bar: Vec<f64>,
    /// Elapsed time in `dt_0d` quanta.
    pub time: TimeIndex,
}

/// The coupled 1D–3D problem: identical fibers embedded in one 3D mesh,
/// advanced by a staggered loop. Each coupled step runs `n` 1D splitting
/// steps per fiber, evaluates activation from the cross-bridge states using
/// the *previous* step's half-sarcomere lengths, homogenizes it to the Gauss
/// points, solves the 3D equilibrium, and finally refreshes fiber positions
/// and half-sarcomere lengths from the new displacement field. The 1D
/// trajectories never read mechanics output within a step, so the mechanics
/// cadence does not perturb them.
pub struct Simulation<M: MembraneModel + Clone = HodgkinHuxley> {
    integrator: FiberIntegrator<M>,
    mesh: MuscleMesh,
    layout: FiberLayout,
    map: EmbeddingMap,
    material: MaterialParams,
    newton: NewtonOptions,
    node_spacing: f64,
}

impl<M: MembraneModel + Clone> Simulation<M> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        schedule: &SplittingSchedule,
        params: &CellParams<M>,
        stimulus: &StimulusProtocol,
        fiber_mesh: &FiberMesh,
        mesh: MuscleMesh,
        layout: FiberLayout,
        material: MaterialParams,
        newton: NewtonOptions,
    ) -> Result<Self, SplittingError> {
        mesh.validate()?;
        material.validate()?;
        layout.validate()?;
        if layout.nodes_per_fiber != fiber_mesh.n_nodes() {
            return Err(FiberError::InvalidMesh(
                "node count does not match the embedding layout",
            )
            .into());
        }
        if fiber_mesh.c_m != params.c_m {
            return Err(FiberError::InvalidMesh(
                "membrane capacitance differs from the cell parameters",
            )
            .into());
        }
        let map = build_embedding(&mesh, &layout)?;
        // The 1D mesh must lie where the embedding thinks the fibers are.
        for (i, &x) in fiber_mesh.node_x.iter().enumerate() {
            let expect = layout.node_position(&mesh, 0, i)[0];
            if (x - expect).abs() > 1e-9 * (1.0 + expect.abs()) {
                return Err(FiberError::InvalidMesh(
                    "node positions do not match the embedding layout",
                )
                .into());
            }
        }
        let integrator = FiberIntegrator::new(schedule, fiber_mesh, params, stimulus)?;
        let node_spacing = layout.node_spacing(&mesh);
        Ok(Self {
            integrator,
            mesh,
            layout,
            map,
            material,
            newton,
            node_spacing,
        })
    }

    pub fn schedule(&self) -> &SplittingSchedule {
        self.integrator.schedule()
    }

    pub fn params(&self) -> &CellParams<M> {
        self.integrator.params()
    }

    pub fn mesh(&self) -> &MuscleMesh {
        &self.mesh
    }

    pub fn layout(&self) -> &FiberLayout {
        &self.layout
    }

    pub fn map(&self) -> &EmbeddingMap {
        &self.map
    }

    /// All fibers at the membrane resting point, mesh undeformed, resting
    /// half-sarcomere lengths, zero activation.
    pub fn resting_world(&self) -> WorldState {
        let npf = self.layout.nodes_per_fiber;
        let fibers = (0..self.layout.n_fibers())
            .map(|_| FiberState::resting(self.integrator.params(), npf))
            .collect();
        WorldState {
            fibers,
            displacement: DisplacementField::zeros(&self.mesh),
            l_hs: vec![self.integrator.params().l_opt; self.layout.n_nodes()],
            gamma_bar: vec![0.0; self.mesh.n_elements() * 8],
            time: 0,
        }
    }

    fn check_world(&self, world: &WorldState) -> Result<(), SplittingError> {
        if world.fibers.len() != self.layout.n_fibers()
            || world.l_hs.len() != self.layout.n_nodes()
            || world.displacement.u.len() != self.mesh.n_nodes()
        {
            return Err(SplittingError::ShapeMismatch(
                "world state does not match the simulation layout",
            ));
        }
        for fiber in &world.fibers {
            if fiber.n_nodes() != self.layout.nodes_per_fiber {
                return Err(SplittingError::ShapeMismatch(
                    "world state does not match the simulation layout",
                ));
            }
        }
        Ok(())
    }

    /// One `dt_3d` step of the staggered coupling loop.
    pub fn coupled_step(&mut self, world: &mut WorldState) -> Result<(), SplittingError> {
        self.check_world(world)?;
        let schedule = *self.integrator.schedule();
        let k = schedule.k as u64;

        for fiber in &mut world.fibers {
            for step in 0..schedule.n as u64 {
                self.integrator.step_1d(fiber, world.time + step * k)?;
            }
        }

        // Activation from the new cross-bridge states and the previous
        // step's half-sarcomere lengths (staggered data flow).
        let npf = self.layout.nodes_per_fiber;
        let params = self.integrator.params().clone();
        let mut gamma_nodes = vec![0.0; self.layout.n_nodes()];
        for (f, fiber) in world.fibers.iter().enumerate() {
            for i in 0..npf {
                let id = self.layout.node_id(f, i);
                gamma_nodes[id] = gamma_from_a2(fiber.a2[i], world.l_hs[id], &params)?;
            }
        }
        world.gamma_bar = homogenize_gamma(&gamma_nodes, &self.map, &self.mesh)?;

        let solution = newton_solve(
            &world.displacement,
            &world.gamma_bar,
            &self.mesh,
            &self.material,
            &self.newton,
        )?;
        world.displacement = solution.u;

        let positions = interpolate_positions(&world.displacement, &self.map, &self.mesh)?;
        world.l_hs =
            half_sarcomere_lengths(&positions, npf, self.node_spacing, params.l_opt)?;

        world.time += schedule.n as u64 * k;
        Ok(())
    }
}

/// The desk-scale isometric single-twitch experiment: a 1 cm³ cube of 2×2×2
/// elements, 6×6 fibers of 31 nodes, every fiber stimulated at its midpoint
/// with 1200 µA/cm² for 0.1 ms.
pub fn single_twitch_with_schedule(
    schedule: &SplittingSchedule,
) -> Result<(Simulation, WorldState), SplittingError> {
    let params = CellParams::<HodgkinHuxley>::default().calibrate_resting_offset();
    let stimulus = StimulusProtocol {
        amplitude: 1200.0,
        t_on: 0.0,
        t_off: 0.1,
        target: vec![15],
    };
    let fiber_mesh = FiberMesh::uniform(31, 1.0, 3.828, 500.0, params.c_m);
    let mesh = MuscleMesh::box_grid([2, 2, 2], [1.0, 1.0, 1.0], [1.0, 0.0, 0.0])?;
    let layout = FiberLayout::new(6, 6, 31);
    let simulation = Simulation::new(
        schedule,
        &params,
        &stimulus,
        &fiber_mesh,
        mesh,
        layout,
        MaterialParams::default(),
        NewtonOptions::default(),
    )?;
    let world = simulation.resting_world();
    Ok((simulation, world))
}

/// [`single_twitch_with_schedule`] at the scheme's default schedule.
pub fn single_twitch(scheme: Scheme) -> Result<(Simulation, WorldState), SplittingError> {
    single_twitch_with_schedule(&SplittingSchedule::default_for(scheme))
}
