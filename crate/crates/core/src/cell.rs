//! 0D membrane and activation dynamics at a single fiber node.
//!
//! A node's state is the membrane potential `v_m`, the gating variables of an
//! ionic membrane model, and a first-order cross-bridge surrogate `a2` that
//! tracks post-power-stroke cross-bridge availability. The membrane model is
//! an implementation of [`MembraneModel`], so richer ionic models can be
//! plugged in without touching the integrators; the default is a classical
//! squid-axon model shifted to a skeletal-muscle resting potential.
//!
//! Sign conventions: the channel current is outward-positive, the stimulus
//! `i_stim` is depolarizing, and the total ionic current is
//! `I_ion = I_channels − i_stim`, so `dv_m/dt = −I_ion / c_m`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors from cell-level evaluation and integration.
#[derive(Debug, Error, PartialEq)]
pub enum CellError {
    #[error("non-finite state")]
    NonFiniteState,
    #[error("integration diverged")]
    IntegrationDiverged,
    #[error("degenerate activation bounds")]
    DegenerateActivationBounds,
    #[error("invalid cell parameters: {0}")]
    InvalidParams(&'static str),
}

/// Ionic membrane model interface: state layout, channel current, gate
/// kinetics. Implementations own their conductances and reversal potentials.
pub trait MembraneModel {
    /// Number of gating variables in the state layout.
    fn gate_count(&self) -> usize;

    /// Total channel current at `(v_m, gates)` in µA/cm², outward positive,
    /// excluding any stimulus.
    fn channel_current(&self, v_m: f64, gates: &[f64]) -> f64;

    /// Writes d(gates)/dt in 1/ms into `dgates`.
    fn gate_rates(&self, v_m: f64, gates: &[f64], dgates: &mut [f64]);

    /// Writes the steady-state gate values at a clamped potential.
    fn steady_gates(&self, v_m: f64, gates: &mut [f64]);

    /// Resting potential in mV: the zero of the steady-state channel current.
    fn resting_potential(&self) -> f64;
}

/// `x / (1 − exp(−x/k))`, the removable-singularity form that appears in the
/// sodium/potassium activation rates. Accurate near x = 0 via `exp_m1`.
#[inline]
fn vtrap(x: f64, k: f64) -> f64 {
    if x == 0.0 {
        k
    } else {
        x / -(-x / k).exp_m1()
    }
}

/// Classical squid-axon membrane kinetics with gates `(m, h, n)`, rigidly
/// shifted along the voltage axis so the resting potential is ≈ −75 mV.
///
/// `v_shift` moves every rate formula and reversal potential together, which
/// preserves the excitation dynamics exactly while placing the resting state
/// in the skeletal-muscle range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HodgkinHuxley {
    /// Peak sodium conductance, mS/cm².
    pub g_na: f64,
    /// Peak potassium conductance, mS/cm².
    pub g_k: f64,
    /// Leak conductance, mS/cm².
    pub g_leak: f64,
    /// Sodium reversal potential, mV (already shifted).
    pub e_na: f64,
    /// Potassium reversal potential, mV (already shifted).
    pub e_k: f64,
    /// Leak reversal potential, mV (already shifted).
    pub e_leak: f64,
    /// Rigid voltage shift applied to the classical formulation, mV.
    pub v_shift: f64,
}

impl Default for HodgkinHuxley {
    fn default() -> Self {
        Self::with_shift(-10.0)
    }
}

impl HodgkinHuxley {
    /// Classical constants with every voltage-dependent term shifted by
    /// `shift` mV. `shift = 0` recovers the textbook −65 mV resting model.
    pub fn with_shift(shift: f64) -> Self {
        Self {
            g_na: 120.0,
            g_k: 36.0,
            g_leak: 0.3,
            e_na: 50.0 + shift,
            e_k: -77.0 + shift,
            e_leak: -54.387 + shift,
            v_shift: shift,
        }
    }

    /// Rate constants `(α_m, β_m, α_h, β_h, α_n, β_n)` in 1/ms.
    #[inline]
    fn rate_constants(&self, v_m: f64) -> [f64; 6] {
        let u = v_m - self.v_shift;
        [
            0.1 * vtrap(u + 40.0, 10.0),
            4.0 * (-(u + 65.0) / 18.0).exp(),
            0.07 * (-(u + 65.0) / 20.0).exp(),
            1.0 / (1.0 + (-(u + 35.0) / 10.0).exp()),
            0.01 * vtrap(u + 55.0, 10.0),
            0.125 * (-(u + 65.0) / 80.0).exp(),
        ]
    }
}

impl MembraneModel for HodgkinHuxley {
    fn gate_count(&self) -> usize {
        3
    }

    #[inline]
    fn channel_current(&self, v_m: f64, gates: &[f64]) -> f64 {
        let (m, h, n) = (gates[0], gates[1], gates[2]);
        self.g_na * m * m * m * h * (v_m - self.e_na)
            + self.g_k * n * n * n * n * (v_m - self.e_k)
            + self.g_leak * (v_m - self.e_leak)
    }

    #[inline]
    fn gate_rates(&self, v_m: f64, gates: &[f64], dgates: &mut [f64]) {
        let [am, bm, ah, bh, an, bn] = self.rate_constants(v_m);
        dgates[0] = am * (1.0 - gates[0]) - bm * gates[0];
        dgates[1] = ah * (1.0 - gates[1]) - bh * gates[1];
        dgates[2] = an * (1.0 - gates[2]) - bn * gates[2];
    }

    fn steady_gates(&self, v_m: f64, gates: &mut [f64]) {
        let [am, bm, ah, bh, an, bn] = self.rate_constants(v_m);
        gates[0] = am / (am + bm);
        gates[1] = ah / (ah + bh);
        gates[2] = an / (an + bn);
    }

    /// Bisection on the steady-state current between the potassium and leak
    /// reversal potentials. Falls back to `e_leak` for degenerate parameter
    /// sets (all conductances zero) where every potential is a rest point.
    fn resting_potential(&self) -> f64 {
        let steady_current = |v: f64| {
            let mut g = [0.0; 3];
            self.steady_gates(v, &mut g);
            self.channel_current(v, &g)
        };
        let (mut lo, mut hi) = (self.e_k - 1.0, self.e_leak + 30.0);
        let (f_lo, f_hi) = (steady_current(lo), steady_current(hi));
        if !(f_lo < 0.0 && f_hi > 0.0) {
            return self.e_leak;
        }
        for _ in 0..128 {
            let mid = 0.5 * (lo + hi);
            if steady_current(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Parameters of one fiber node: capacitance, the ionic membrane model, the
/// cross-bridge surrogate, and the force–length curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CellParams<M: MembraneModel = HodgkinHuxley> {
    /// Membrane capacitance, µF/cm².
    pub c_m: f64,
    /// Ionic membrane model (conductances, reversal potentials).
    pub membrane: M,
    /// Cross-bridge level treated as zero activation (resting offset).
    pub a2_min: f64,
    /// Cross-bridge level treated as full activation.
    pub a2_max: f64,
    /// Relaxation time of the cross-bridge surrogate, ms.
    pub tau_a2: f64,
    /// Half-activation potential of the surrogate steady state, mV.
    pub v_half: f64,
    /// Slope of the surrogate steady state, mV.
    pub k_act: f64,
    /// Optimal half-sarcomere length, µm.
    pub l_opt: f64,
    /// Half-width of the force–length tent, as a fraction of `l_opt`.
    pub fl_width: f64,
}

impl<M: MembraneModel + Default> Default for CellParams<M> {
    fn default() -> Self {
        Self {
            c_m: 1.0,
            membrane: M::default(),
            a2_min: 0.0,
            a2_max: 1.0,
            tau_a2: 20.0,
            v_half: -40.0,
            k_act: 5.0,
            l_opt: 1.1,
            fl_width: 0.5,
        }
    }
}

impl<M: MembraneModel> CellParams<M> {
    pub fn validate(&self) -> Result<(), CellError> {
        if !(self.c_m > 0.0) {
            return Err(CellError::InvalidParams("c_m must be positive"));
        }
        if !(self.a2_max > self.a2_min) {
            return Err(CellError::InvalidParams("a2_max must exceed a2_min"));
        }
        if !(self.tau_a2 > 0.0) {
            return Err(CellError::InvalidParams("tau_a2 must be positive"));
        }
        if !(self.l_opt > 0.0) {
            return Err(CellError::InvalidParams("l_opt must be positive"));
        }
        if !(self.fl_width > 0.0 && self.fl_width < 1.0) {
            return Err(CellError::InvalidParams("fl_width must be in (0, 1)"));
        }
        Ok(())
    }

    /// Force–length tent: 1 at `l_opt`, linear to 0 at `l_opt·(1 ± fl_width)`.
    #[inline]
    pub fn force_length(&self, l_hs: f64) -> f64 {
        (1.0 - (l_hs - self.l_opt).abs() / (self.fl_width * self.l_opt)).max(0.0)
    }

    /// Steady-state cross-bridge level at a clamped potential (sigmoid).
    #[inline]
    pub fn activation_steady(&self, v_m: f64) -> f64 {
        1.0 / (1.0 + (-(v_m - self.v_half) / self.k_act).exp())
    }

    /// The model's resting fixed point: resting potential, steady gates, and
    /// the steady cross-bridge level (clamped into the activation bounds).
    pub fn resting_state(&self) -> CellState {
        let v_rest = self.membrane.resting_potential();
        let mut gates = vec![0.0; self.membrane.gate_count()];
        self.membrane.steady_gates(v_rest, &mut gates);
        let a2 = self
            .activation_steady(v_rest)
            .clamp(self.a2_min, self.a2_max);
        CellState { v_m: v_rest, gates, a2 }
    }

    /// Sets `a2_min` to the resting cross-bridge level, so that γ is exactly
    /// zero at rest. This matches the definition of the offset as the
    /// post-power-stroke concentration in the resting state.
    pub fn calibrate_resting_offset(mut self) -> Self {
        self.a2_min = self.activation_steady(self.membrane.resting_potential());
        self
    }
}

/// Dynamic state of one fiber node.
#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    /// Membrane potential, mV.
    pub v_m: f64,
    /// Gating variables, each in [0, 1], layout defined by the membrane model.
    pub gates: Vec<f64>,
    /// Cross-bridge surrogate, in [a2_min, a2_max].
    pub a2: f64,
}

impl CellState {
    pub fn is_finite(&self) -> bool {
        self.v_m.is_finite() && self.a2.is_finite() && self.gates.iter().all(|g| g.is_finite())
    }
}

/// Time derivative of a [`CellState`].
#[derive(Debug, Clone, PartialEq)]
pub struct CellDerivative {
    /// dV_m/dt, mV/ms.
    pub dv_m: f64,
    /// d(gates)/dt, 1/ms.
    pub dgates: Vec<f64>,
    /// dA₂/dt, 1/ms.
    pub da2: f64,
}

/// Stimulation protocol: a rectangular current pulse applied to a set of
/// fiber nodes. The pulse is sampled at sub-step start times and treated as
/// constant over each sub-step; it is on for `t_on ≤ t < t_off`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusProtocol {
    /// Pulse amplitude, µA/cm².
    pub amplitude: f64,
    /// Pulse onset, ms.
    pub t_on: f64,
    /// Pulse end, ms.
    pub t_off: f64,
    /// Stimulated node indices along the fiber (typically the midpoint).
    pub target: Vec<usize>,
}

impl StimulusProtocol {
    pub fn validate(&self) -> Result<(), CellError> {
        if !(self.t_off >= self.t_on) {
            return Err(CellError::InvalidParams("t_off must be >= t_on"));
        }
        if !(self.amplitude >= 0.0) {
            return Err(CellError::InvalidParams("amplitude must be >= 0"));
        }
        Ok(())
    }

    /// Whether the pulse is on at time `t` (ms).
    #[inline]
    pub fn is_on(&self, t: f64) -> bool {
        self.t_on <= t && t < self.t_off
    }
}

/// Total ionic current `I_ion(y, V_m, I_stim) = I_channels − i_stim`
/// in µA/cm².
pub fn ionic_current<M: MembraneModel>(
    state: &CellState,
    params: &CellParams<M>,
    i_stim: f64,
) -> Result<f64, CellError> {
    if !state.is_finite() {
        return Err(CellError::NonFiniteState);
    }
    Ok(params.membrane.channel_current(state.v_m, &state.gates) - i_stim)
}

/// Full right-hand side at a state: membrane line, gate kinetics, and the
/// cross-bridge relaxation `dA₂/dt = (a∞(V_m) − A₂)/τ`.
pub fn cell_rhs<M: MembraneModel>(
    state: &CellState,
    params: &CellParams<M>,
    i_stim: f64,
) -> Result<CellDerivative, CellError> {
    let i_ion = ionic_current(state, params, i_stim)?;
    let mut dgates = vec![0.0; state.gates.len()];
    params
        .membrane
        .gate_rates(state.v_m, &state.gates, &mut dgates);
    Ok(CellDerivative {
        dv_m: -i_ion / params.c_m,
        dgates,
        da2: (params.activation_steady(state.v_m) - state.a2) / params.tau_a2,
    })
}

/// In-place explicit Euler sub-step shared by the pure single-cell API and
/// the fiber-level reaction sweeps. Gates are clamped to [0, 1] and `a2` to
/// its bounds after the update.
#[inline]
pub(crate) fn euler_substep<M: MembraneModel>(
    params: &CellParams<M>,
    dt: f64,
    i_stim: f64,
    v_m: &mut f64,
    gates: &mut [f64],
    a2: &mut f64,
    dgates: &mut [f64],
) -> Result<(), CellError> {
    let v0 = *v_m;
    let i_ion = params.membrane.channel_current(v0, gates) - i_stim;
    params.membrane.gate_rates(v0, gates, dgates);
    let da2 = (params.activation_steady(v0) - *a2) / params.tau_a2;

    *v_m = v0 + dt * (-i_ion / params.c_m);
    for (g, dg) in gates.iter_mut().zip(dgates.iter()) {
        *g = (*g + dt * dg).clamp(0.0, 1.0);
    }
    *a2 = (*a2 + dt * da2).clamp(params.a2_min, params.a2_max);

    if v_m.is_finite() && a2.is_finite() && gates.iter().all(|g| g.is_finite()) {
        Ok(())
    } else {
        Err(CellError::IntegrationDiverged)
    }
}

/// Scratch buffers for [`heun_substep`], sized to the model's gate count.
#[derive(Debug, Clone)]
pub(crate) struct HeunScratch {
    dg0: Vec<f64>,
    g_pred: Vec<f64>,
    dg1: Vec<f64>,
}

impl HeunScratch {
    pub(crate) fn new(gate_count: usize) -> Self {
        Self {
            dg0: vec![0.0; gate_count],
            g_pred: vec![0.0; gate_count],
            dg1: vec![0.0; gate_count],
        }
    }
}

/// In-place Heun sub-step: explicit Euler predictor, then corrector with the
/// averaged right-hand side. The stimulus is held constant over the sub-step
/// (both stages see the same `i_stim`).
#[inline]
pub(crate) fn heun_substep<M: MembraneModel>(
    params: &CellParams<M>,
    dt: f64,
    i_stim: f64,
    v_m: &mut f64,
    gates: &mut [f64],
    a2: &mut f64,
    scratch: &mut HeunScratch,
) -> Result<(), CellError> {
    let (v0, a0) = (*v_m, *a2);
    let membrane = &params.membrane;

    let fv0 = -(membrane.channel_current(v0, gates) - i_stim) / params.c_m;
    membrane.gate_rates(v0, gates, &mut scratch.dg0);
    let fa0 = (params.activation_steady(v0) - a0) / params.tau_a2;

    let vp = v0 + dt * fv0;
    for i in 0..gates.len() {
        scratch.g_pred[i] = (gates[i] + dt * scratch.dg0[i]).clamp(0.0, 1.0);
    }
    let ap = (a0 + dt * fa0).clamp(params.a2_min, params.a2_max);

    let fv1 = -(membrane.channel_current(vp, &scratch.g_pred) - i_stim) / params.c_m;
    membrane.gate_rates(vp, &scratch.g_pred, &mut scratch.dg1);
    let fa1 = (params.activation_steady(vp) - ap) / params.tau_a2;

    *v_m = v0 + dt * (0.5 * (fv0 + fv1));
    for i in 0..gates.len() {
        gates[i] = (gates[i] + dt * (0.5 * (scratch.dg0[i] + scratch.dg1[i]))).clamp(0.0, 1.0);
    }
    *a2 = (a0 + dt * (0.5 * (fa0 + fa1))).clamp(params.a2_min, params.a2_max);

    if v_m.is_finite() && a2.is_finite() && gates.iter().all(|g| g.is_finite()) {
        Ok(())
    } else {
        Err(CellError::IntegrationDiverged)
    }
}

/// One explicit Euler step: `state + dt · cell_rhs(state)`.
pub fn euler_step<M: MembraneModel>(
    state: &CellState,
    dt: f64,
    params: &CellParams<M>,
    i_stim: f64,
) -> Result<CellState, CellError> {
    let mut next = state.clone();
    let mut dgates = vec![0.0; state.gates.len()];
    euler_substep(
        params,
        dt,
        i_stim,
        &mut next.v_m,
        &mut next.gates,
        &mut next.a2,
        &mut dgates,
    )?;
    Ok(next)
}

/// One Heun step: Euler predictor, then trapezoidal corrector.
pub fn heun_step<M: MembraneModel>(
    state: &CellState,
    dt: f64,
    params: &CellParams<M>,
    i_stim: f64,
) -> Result<CellState, CellError> {
    let mut next = state.clone();
    let mut scratch = HeunScratch::new(state.gates.len());
    heun_substep(
        params,
        dt,
        i_stim,
        &mut next.v_m,
        &mut next.gates,
        &mut next.a2,
        &mut scratch,
    )?;
    Ok(next)
}

/// Activation from a raw cross-bridge level and half-sarcomere length:
/// `f_fl(l_hs) · (A₂ − A₂min)/(A₂max − A₂min)`, clamped to [0, 1].
pub fn gamma_from_a2<M: MembraneModel>(
    a2: f64,
    l_hs: f64,
    params: &CellParams<M>,
) -> Result<f64, CellError> {
    if params.a2_max == params.a2_min {
        return Err(CellError::DegenerateActivationBounds);
    }
    let fraction = (a2 - params.a2_min) / (params.a2_max - params.a2_min);
    Ok((params.force_length(l_hs) * fraction).clamp(0.0, 1.0))
}

/// Activation parameter γ of a cell state at half-sarcomere length `l_hs`.
pub fn gamma<M: MembraneModel>(
    state: &CellState,
    l_hs: f64,
    params: &CellParams<M>,
) -> Result<f64, CellError> {
    gamma_from_a2(state.a2, l_hs, params)
}
