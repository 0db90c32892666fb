//! Per-worker timing, memory, and ghost-layer accounting.
//!
//! Each worker reports wall seconds, a memory high-water mark of its
//! simulation state, and its ghost-element count for every run component.
//! The exclusive components are disjoint slices of the worker's run, so
//! their sum can exceed the measured total only by timer noise — `validate`
//! enforces that with a 5% allowance.

use serde::{Deserialize, Serialize};

use crate::RuntimeError;

/// Report components, in presentation order; the first five are exclusive.
pub const COMPONENTS: [&str; 6] = [
    "solver_0d",
    "solver_1d",
    "solver_3d",
    "interpolation",
    "homogenization",
    "total",
];

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ComponentMetrics {
    /// Wall time, seconds.
    pub seconds: f64,
    /// Peak bytes held in the worker's simulation state while this component
    /// ran.
    pub bytes_high_water: u64,
    /// Ghost elements the worker keeps for its partition.
    pub ghost_elements: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkerStats {
    pub rank: usize,
    /// Membrane-kinetics sub-steps.
    pub solver_0d: ComponentMetrics,
    /// Fiber diffusion solves, including cut-fiber gathers and scatters.
    pub solver_1d: ComponentMetrics,
    /// Blocked on the equilibrium solve: activation hand-off to the
    /// coordinator through receipt of the displacement field.
    pub solver_3d: ComponentMetrics,
    /// Ghost-layer exchange, fiber-position interpolation, and
    /// half-sarcomere lengths.
    pub interpolation: ComponentMetrics,
    /// Per-element activation means.
    pub homogenization: ComponentMetrics,
    /// The whole worker run.
    pub total: ComponentMetrics,
    /// Wall time blocked on worker-to-worker transfers. Zero for a single
    /// worker.
    pub comm_seconds: f64,
    /// Displacement ghost payload sent over the whole run.
    pub displacement_bytes_sent: u64,
    /// Cut-fiber membrane-potential payload sent over the whole run.
    pub vm_interface_bytes_sent: u64,
}

impl WorkerStats {
    /// Components in [`COMPONENTS`] order.
    pub fn components(&self) -> [(&'static str, &ComponentMetrics); 6] {
        [
            ("solver_0d", &self.solver_0d),
            ("solver_1d", &self.solver_1d),
            ("solver_3d", &self.solver_3d),
            ("interpolation", &self.interpolation),
            ("homogenization", &self.homogenization),
            ("total", &self.total),
        ]
    }

    /// Sum of the five exclusive component times.
    pub fn exclusive_seconds(&self) -> f64 {
        self.solver_0d.seconds
            + self.solver_1d.seconds
            + self.solver_3d.seconds
            + self.interpolation.seconds
            + self.homogenization.seconds
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    /// One entry per partition, rank order.
    pub workers: Vec<WorkerStats>,
}

impl TimingReport {
    pub fn validate(&self) -> Result<(), RuntimeError> {
        for w in &self.workers {
            if w.total.seconds < 0.95 * w.exclusive_seconds() {
                return Err(RuntimeError::InvalidReport(
                    "exclusive component times exceed the measured total",
                ));
            }
            if w.components().iter().any(|(_, m)| m.seconds < 0.0) {
                return Err(RuntimeError::InvalidReport("negative component time"));
            }
        }
        Ok(())
    }

    /// Total displacement ghost payload sent by all workers.
    pub fn displacement_bytes(&self) -> u64 {
        self.workers.iter().map(|w| w.displacement_bytes_sent).sum()
    }

    /// Total cut-fiber membrane-potential payload sent by all workers.
    pub fn vm_interface_bytes(&self) -> u64 {
        self.workers.iter().map(|w| w.vm_interface_bytes_sent).sum()
    }

    /// Largest per-worker time of one component, by [`COMPONENTS`] name.
    pub fn max_seconds(&self, component: &str) -> Option<f64> {
        self.fold_component(component, f64::NEG_INFINITY, |acc, m| acc.max(m.seconds))
    }

    /// Largest per-worker memory high-water mark of one component.
    pub fn max_bytes(&self, component: &str) -> Option<u64> {
        self.workers
            .iter()
            .map(|w| {
                w.components()
                    .iter()
                    .find(|(name, _)| *name == component)
                    .map(|(_, m)| m.bytes_high_water)
            })
            .collect::<Option<Vec<_>>>()
            .and_then(|v| v.into_iter().max())
    }

    /// Mean ghost-element count across the workers.
    pub fn average_ghost_elements(&self) -> f64 {
        if self.workers.is_empty() {
            return 0.0;
        }
        self.workers
            .iter()
            .map(|w| w.total.ghost_elements as f64)
            .sum::<f64>()
            / self.workers.len() as f64
    }

    fn fold_component(
        &self,
        component: &str,
        init: f64,
        fold: impl Fn(f64, &ComponentMetrics) -> f64,
    ) -> Option<f64> {
        let mut acc = init;
        for w in &self.workers {
            let (_, m) = w
                .components()
                .into_iter()
                .find(|(name, _)| *name == component)?;
            acc = fold(acc, m);
        }
        if self.workers.is_empty() {
            None
        } else {
            Some(acc)
        }
    }
}
