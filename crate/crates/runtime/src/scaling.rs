//! Scaling studies over the parallel executor: weak-scaling ladders that
//! grow the domain with the worker count, and factorization sweeps that try
//! every process-grid shape on a fixed domain. Results flatten into one CSV
//! table of per-component timing, peak memory, and ghost-layer size.

use musim_core::partition::{
    boundary_metrics, factorize, PartitionError, PartitionLayout, Strategy,
};
use musim_core::splitting::{DiffusionMethod, OdeMethod, Scheme, SplittingSchedule};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use crate::parallel::{run_parallel, CoupledScenario};
use crate::report::COMPONENTS;
use crate::report::TimingReport;
use crate::RuntimeError;

/// One run of the coupled loop on one domain and process grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub domain: [usize; 3],
    pub workers: usize,
    pub strategy: Strategy,
    /// Explicit process grid; `None` lets [`factorize`] choose.
    pub subdivisions: Option<[usize; 3]>,
    pub schedule: SplittingSchedule,
    pub coupling_steps: usize,
    pub stimulus_amplitude: f64,
}

impl ExperimentConfig {
    fn layout(&self) -> Result<PartitionLayout, PartitionError> {
        match self.subdivisions {
            Some(p) => {
                if p.iter().product::<usize>() != self.workers {
                    return Err(PartitionError::Infeasible);
                }
                PartitionLayout::from_subdivisions(self.domain, p, self.strategy)
            }
            None => factorize(self.workers, self.domain, self.strategy),
        }
    }
}

/// Measurements from one completed configuration.
#[derive(Debug)]
pub struct ConfigOutcome {
    pub config: ExperimentConfig,
    pub subdivisions: [usize; 3],
    pub report: TimingReport,
    pub average_boundary_area: f64,
    pub ghost_elements_total: usize,
    /// Displacement halo traffic actually sent over the whole run.
    pub displacement_halo_bytes: u64,
    /// Cut-fiber potential traffic actually sent over the whole run.
    pub vm_interface_bytes: u64,
    /// Plan-predicted displacement traffic for one exchange.
    pub predicted_displacement_bytes_per_step: u64,
}

/// A batch of configurations: completed outcomes plus the configurations the
/// domain could not accommodate, with the reason.
#[derive(Debug, Default)]
pub struct ScalingReport {
    pub outcomes: Vec<ConfigOutcome>,
    pub skipped: Vec<(ExperimentConfig, String)>,
}

impl ScalingReport {
    /// Flat table, one row per configuration and component. `seconds` and
    /// `bytes_peak` take the per-component maximum over the workers;
    /// `ghost_elements_avg` is the mean ghost-layer size.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("experiment,workers,p_x,p_y,p_z,component,seconds,bytes_peak,ghost_elements_avg\n");
        for o in &self.outcomes {
            let ghost_avg = o.report.average_ghost_elements();
            for &name in COMPONENTS.iter() {
                let seconds = o.report.max_seconds(name).unwrap_or(0.0);
                let bytes = o.report.max_bytes(name).unwrap_or(0);
                writeln!(
                    out,
                    "{},{},{},{},{},{},{:.6},{},{:.3}",
                    o.config.name,
                    o.config.workers,
                    o.subdivisions[0],
                    o.subdivisions[1],
                    o.subdivisions[2],
                    name,
                    seconds,
                    bytes,
                    ghost_avg,
                )
                .expect("writing to a string cannot fail");
            }
        }
        out
    }
}

/// Run every configuration, collecting infeasible ones into `skipped`
/// instead of failing the batch. Errors inside a feasible run still abort:
/// those are defects, not layout mismatches.
pub fn run_scaling_experiment(
    configs: &[ExperimentConfig],
) -> Result<ScalingReport, RuntimeError> {
    let mut report = ScalingReport::default();
    for config in configs {
        let layout = match config.layout() {
            Ok(l) => l,
            Err(e) => {
                report.skipped.push((config.clone(), e.to_string()));
                continue;
            }
        };
        let scenario = CoupledScenario::box_demo(
            config.domain,
            config.stimulus_amplitude,
            config.schedule,
        )?;
        let outcome = run_parallel(&scenario, &layout, config.coupling_steps)?;
        outcome.report.validate()?;
        let model = boundary_metrics(&layout);
        report.outcomes.push(ConfigOutcome {
            config: config.clone(),
            subdivisions: layout.subdivisions,
            average_boundary_area: model.average_boundary_area,
            ghost_elements_total: model.ghost_elements.iter().sum(),
            displacement_halo_bytes: outcome.report.displacement_bytes(),
            vm_interface_bytes: outcome.report.vm_interface_bytes(),
            predicted_displacement_bytes_per_step: outcome
                .plan
                .displacement_bytes_per_exchange(),
            report: outcome.report,
        });
    }
    Ok(report)
}

fn study_schedule() -> SplittingSchedule {
    SplittingSchedule {
        dt_0d: 5e-3,
        k: 10,
        n: 4,
        scheme: Scheme::Godunov,
        ode_method: OdeMethod::Euler,
        diffusion_method: DiffusionMethod::ImplicitEuler,
    }
}

/// Weak-scaling ladder: the worker count doubles each step and the domain
/// doubles along one axis (x, then z, then y, cyclically), holding eight
/// elements per worker. The grid shape is left to [`factorize`].
pub fn weak_scaling_configs(steps: usize) -> Vec<ExperimentConfig> {
    let mut configs = Vec::with_capacity(steps);
    let mut domain = [2usize, 2, 2];
    let grow_axes = [0usize, 2, 1];
    for step in 0..steps {
        if step > 0 {
            domain[grow_axes[(step - 1) % 3]] *= 2;
        }
        let workers = 1usize << step;
        configs.push(ExperimentConfig {
            name: format!("weak_{workers}"),
            domain,
            workers,
            strategy: Strategy::Cubic,
            subdivisions: None,
            schedule: study_schedule(),
            coupling_steps: 1,
            stimulus_amplitude: 1200.0,
        });
    }
    configs
}

/// Every ordered factorization of `workers` as an explicit process grid on
/// one domain. Grids the domain cannot hold are kept in the batch so the
/// sweep reports them as skipped.
pub fn factorization_sweep_configs(workers: usize, domain: [usize; 3]) -> Vec<ExperimentConfig> {
    let mut configs = Vec::new();
    for px in 1..=workers {
        if workers % px != 0 {
            continue;
        }
        let rest = workers / px;
        for py in 1..=rest {
            if rest % py != 0 {
                continue;
            }
            let p = [px, py, rest / py];
            configs.push(ExperimentConfig {
                name: format!("sweep_{}x{}x{}", p[0], p[1], p[2]),
                domain,
                workers,
                strategy: Strategy::General,
                subdivisions: Some(p),
                schedule: study_schedule(),
                coupling_steps: 1,
                // Quiescent fibers: the sweep probes communication volume,
                // not dynamics.
                stimulus_amplitude: 0.0,
            });
        }
    }
    configs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::halo::DISPLACEMENT_BYTES_PER_ELEMENT;

    #[test]
    fn the_ladder_holds_eight_elements_per_worker() {
        let configs = weak_scaling_configs(4);
        assert_eq!(configs.len(), 4);
        let domains: Vec<[usize; 3]> = configs.iter().map(|c| c.domain).collect();
        assert_eq!(domains, [[2, 2, 2], [4, 2, 2], [4, 2, 4], [4, 4, 4]]);
        for c in &configs {
            assert_eq!(c.domain.iter().product::<usize>(), 8 * c.workers);
        }
    }

    #[test]
    fn weak_scaling_runs_produce_one_csv_row_per_component() {
        let report = run_scaling_experiment(&weak_scaling_configs(4)).unwrap();
        assert_eq!(report.outcomes.len(), 4);
        assert!(report.skipped.is_empty());

        let grids: Vec<[usize; 3]> = report.outcomes.iter().map(|o| o.subdivisions).collect();
        assert_eq!(grids, [[1, 1, 1], [2, 1, 1], [2, 1, 2], [2, 2, 2]]);

        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 4 * COMPONENTS.len());
        assert_eq!(
            lines[0],
            "experiment,workers,p_x,p_y,p_z,component,seconds,bytes_peak,ghost_elements_avg"
        );
        assert!(lines[1].starts_with("weak_1,1,1,1,1,solver_0d,"));
        for (i, o) in report.outcomes.iter().enumerate() {
            for (j, &name) in COMPONENTS.iter().enumerate() {
                let row = lines[1 + i * COMPONENTS.len() + j];
                let fields: Vec<&str> = row.split(',').collect();
                assert_eq!(fields.len(), 9);
                assert_eq!(fields[0], o.config.name);
                assert_eq!(fields[5], name);
            }
        }

        // The single-worker rung communicates nothing.
        let solo = &report.outcomes[0];
        assert_eq!(solo.report.workers[0].comm_seconds, 0.0);
        assert_eq!(solo.displacement_halo_bytes, 0);
        assert_eq!(solo.vm_interface_bytes, 0);

        // Weak scaling: per-worker state stays near-constant as the domain
        // grows with the worker count.
        let peaks: Vec<u64> = report
            .outcomes
            .iter()
            .map(|o| o.report.max_bytes("total").unwrap())
            .collect();
        let lo = *peaks.iter().min().unwrap() as f64;
        let hi = *peaks.iter().max().unwrap() as f64;
        assert!(
            hi / lo < 4.0,
            "per-worker peak bytes should stay near-constant: {peaks:?}"
        );
    }

    #[test]
    fn the_sweep_covers_every_grid_and_skips_the_oversubdivided_ones() {
        let configs = factorization_sweep_configs(36, [36, 6, 6]);
        assert_eq!(configs.len(), 36);
        let report = run_scaling_experiment(&configs).unwrap();
        assert_eq!(report.outcomes.len() + report.skipped.len(), 36);
        assert_eq!(report.outcomes.len(), 20);
        for (config, reason) in &report.skipped {
            let p = config.subdivisions.unwrap();
            assert!(p[1] > 6 || p[2] > 6, "only oversubdivided grids skip: {p:?}");
            assert_eq!(reason, "infeasible layout");
        }

        // Measured halo traffic equals the closed-form interface model
        // exactly, and grows monotonically with the average boundary area.
        let mut by_area: Vec<(f64, u64)> = Vec::new();
        for o in &report.outcomes {
            let expected = 2 * boundary_metrics(&o.config.layout().unwrap())
                .total_interface_area as u64
                * DISPLACEMENT_BYTES_PER_ELEMENT
                * o.config.coupling_steps as u64;
            assert_eq!(o.displacement_halo_bytes, expected, "{}", o.config.name);
            assert_eq!(
                o.predicted_displacement_bytes_per_step
                    * o.config.coupling_steps as u64,
                o.displacement_halo_bytes
            );
            by_area.push((o.average_boundary_area, o.displacement_halo_bytes));
        }
        by_area.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in by_area.windows(2) {
            if w[0].0 < w[1].0 {
                assert!(
                    w[0].1 < w[1].1,
                    "traffic must grow with boundary area: {w:?}"
                );
            }
        }

        // Pillar-shaped grids (p_x = 1) never move fiber potentials.
        for o in &report.outcomes {
            if o.subdivisions[0] == 1 {
                assert_eq!(o.vm_interface_bytes, 0);
            } else {
                assert!(o.vm_interface_bytes > 0);
            }
        }
    }

    #[test]
    fn explicit_grids_must_match_the_worker_count() {
        let mut config = factorization_sweep_configs(4, [4, 2, 2]).remove(0);
        config.workers = 8;
        let report = run_scaling_experiment(&[config]).unwrap();
        assert!(report.outcomes.is_empty());
        assert_eq!(report.skipped.len(), 1);
    }
}
