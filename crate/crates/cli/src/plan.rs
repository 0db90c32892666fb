//! Partition planning without running anything: choose a process grid for a
//! domain, and report the communication the coupled loop would generate on
//! it.

use std::fmt::Write as _;

use musim_core::partition::{
    boundary_metrics, factorize, optimize_layout, PartitionLayout, Strategy,
};
use musim_runtime::halo::DISPLACEMENT_BYTES_PER_ELEMENT;

use crate::error::CliError;

/// Picks a layout and renders its communication model. With an
/// `unused_weight`, nearby smaller process counts compete against grid
/// quality and some processes may idle; without one, the count is exact.
pub fn plan(
    workers: usize,
    domain: [usize; 3],
    strategy: Strategy,
    unused_weight: Option<f64>,
) -> Result<String, CliError> {
    if workers == 0 {
        return Err(CliError::config("workers must be positive"));
    }
    if domain.iter().any(|&d| d == 0) {
        return Err(CliError::config("domain axes must be positive"));
    }
    let layout = match unused_weight {
        Some(w) => {
            if !(w >= 0.0) {
                return Err(CliError::config("unused-weight must be non-negative"));
            }
            optimize_layout(workers, domain, strategy, w)
        }
        None => factorize(workers, domain, strategy).map_err(|_| {
            CliError::config(format!(
                "no {strategy:?} grid of {workers} processes fits a {domain:?} domain"
            ))
        })?,
    };
    Ok(render(&layout, workers))
}

fn render(layout: &PartitionLayout, requested: usize) -> String {
    let model = boundary_metrics(layout);
    let p = layout.subdivisions;
    let used = layout.n_partitions();
    let mut out = String::new();

    let _ = writeln!(
        out,
        "layout: {}x{}x{} over {:?} elements ({:?})",
        p[0], p[1], p[2], layout.domain, layout.strategy
    );
    let _ = writeln!(
        out,
        "  processes: {used} working, {} idle of {requested} requested",
        requested - used
    );
    for (axis, name) in ["x", "y", "z"].iter().enumerate() {
        let _ = writeln!(out, "  {name} splits: {:?}", layout.splits[axis]);
    }
    let _ = writeln!(
        out,
        "  interface: {} faces total, average boundary {:.3} faces/partition",
        model.total_interface_area, model.average_boundary_area
    );
    let ghost_max = model.ghost_elements.iter().max().copied().unwrap_or(0);
    let ghost_total: usize = model.ghost_elements.iter().sum();
    let _ = writeln!(
        out,
        "  ghost layer: {ghost_total} elements total, {ghost_max} on the busiest partition"
    );
    let _ = writeln!(
        out,
        "  displacement traffic: {} B per exchange",
        2 * model.total_interface_area as u64 * DISPLACEMENT_BYTES_PER_ELEMENT
    );
    if model.fiber_cut_planes == 0 {
        let _ = writeln!(
            out,
            "  fibers: uncut; every 1D solve stays on its own partition"
        );
    } else {
        let _ = writeln!(
            out,
            "  fibers: cut by {} plane(s); each fiber gathers to its head partition per step",
            model.fiber_cut_planes
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_planning_reports_the_tabulated_grid() {
        let report = plan(144, [144, 12, 12], Strategy::Cubic, None).unwrap();
        assert!(report.contains("layout: 36x2x2"), "{report}");
        assert!(report.contains("144 working, 0 idle of 144"));
        assert!(report.contains("average boundary 118"));
        assert!(report.contains("cut by 35 plane(s)"));
    }

    #[test]
    fn pillars_never_cut_fibers() {
        let report = plan(4, [8, 4, 4], Strategy::Pillar, None).unwrap();
        assert!(report.contains("layout: 1x"), "{report}");
        assert!(report.contains("uncut"), "{report}");
    }

    #[test]
    fn weighted_planning_may_idle_processes() {
        // 65 processes cannot tile [8,8,8] at all; with a mild idle penalty
        // the planner drops to the balanced 64-process cube instead.
        let report = plan(65, [8, 8, 8], Strategy::General, Some(0.1)).unwrap();
        assert!(report.contains("layout: 4x4x4"), "{report}");
        assert!(report.contains("1 idle of 65 requested"), "{report}");
    }

    #[test]
    fn infeasible_requests_are_config_errors() {
        let err = plan(64, [2, 2, 2], Strategy::Cubic, None).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert_eq!(plan(0, [2, 2, 2], Strategy::Cubic, None).unwrap_err().exit_code(), 2);
        // The weighted planner always finds something feasible instead.
        assert!(plan(64, [2, 2, 2], Strategy::Cubic, Some(1.0)).is_ok());
    }
}
