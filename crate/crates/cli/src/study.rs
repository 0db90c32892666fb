//! Numerical studies: convergence ladders, solver shoot-outs, partition
//! sweeps, and scaling runs. Every study renders to one CSV table whose
//! non-timing columns are deterministic.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use musim_core::cell::{euler_step, heun_step, CellParams, HodgkinHuxley};
use musim_core::fiber::{build_implicit_euler_system, linear_solve, FiberMesh, SolveMethod};
use musim_core::partition::{boundary_metrics, PartitionLayout, Strategy};
use musim_core::splitting::{probe_stimulated_potential, Scheme};
use musim_runtime::halo::DISPLACEMENT_BYTES_PER_ELEMENT;
use musim_runtime::scaling::{run_scaling_experiment, weak_scaling_configs};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudyKind {
    /// Error of the membrane integrators against substep count.
    OdeConvergence,
    /// Error of the coupled splitting schemes against the 1D step size.
    SplittingConvergence,
    /// Wall time and agreement of the tridiagonal solvers against size.
    SolverComparison,
    /// Communication model of every process grid on one domain.
    PartitionSweep,
    /// Timed weak-scaling ladder on the threaded runtime.
    WeakScaling,
}

impl FromStr for StudyKind {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "ode_convergence" => Ok(Self::OdeConvergence),
            "splitting_convergence" => Ok(Self::SplittingConvergence),
            "solver_comparison" => Ok(Self::SolverComparison),
            "partition_sweep" => Ok(Self::PartitionSweep),
            "weak_scaling" => Ok(Self::WeakScaling),
            other => Err(CliError::config(format!(
                "unknown study {other:?}; expected ode_convergence, \
                 splitting_convergence, solver_comparison, partition_sweep, \
                 or weak_scaling"
            ))),
        }
    }
}

/// Knobs shared by the studies that take them; the rest ignore both.
#[derive(Debug, Clone, Copy, Default)]
pub struct StudyOptions {
    /// Process count (partition_sweep, weak_scaling).
    pub workers: Option<usize>,
    /// Element grid (partition_sweep).
    pub domain: Option<[usize; 3]>,
}

pub fn run_study(kind: StudyKind, options: &StudyOptions) -> Result<String, CliError> {
    match kind {
        StudyKind::OdeConvergence => ode_convergence(&[1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024]),
        StudyKind::SplittingConvergence => splitting_convergence(&[4e-3, 2e-3, 1e-3]),
        StudyKind::SolverComparison => solver_comparison(&[100, 1_000, 10_000, 100_000]),
        StudyKind::PartitionSweep => partition_sweep(
            options.workers.unwrap_or(36),
            options.domain.unwrap_or([36, 6, 6]),
        ),
        StudyKind::WeakScaling => weak_scaling(options.workers.unwrap_or(8)),
    }
}

/// One membrane point under a constant twitch-strength current for a short
/// window, integrated with `k` substeps; the reference is a far finer ladder
/// rung of the higher-order method.
fn ode_convergence(ladder: &[u32]) -> Result<String, CliError> {
    const WINDOW_MS: f64 = 5e-4;
    const I_STIM: f64 = 1200.0;
    let params = CellParams::<HodgkinHuxley>::default().calibrate_resting_offset();

    let integrate = |heun: bool, k: u32| -> Result<f64, CliError> {
        let dt = WINDOW_MS / k as f64;
        let mut state = params.resting_state();
        for _ in 0..k {
            state = if heun {
                heun_step(&state, dt, &params, I_STIM)
            } else {
                euler_step(&state, dt, &params, I_STIM)
            }
            .map_err(CliError::solver)?;
        }
        Ok(state.v_m)
    };

    let k_ref = ladder.iter().max().copied().unwrap_or(1) * 16;
    let reference = integrate(true, k_ref)?;

    let mut csv = String::from("k,dt_0d_ms,euler_err,heun_err\n");
    for &k in ladder {
        let euler_err = (integrate(false, k)? - reference).abs();
        let heun_err = (integrate(true, k)? - reference).abs();
        writeln!(csv, "{k},{:e},{euler_err:e},{heun_err:e}", WINDOW_MS / k as f64)
            .expect("writing to a string cannot fail");
    }
    Ok(csv)
}

/// Midpoint potential of a stimulated fiber after 0.1 ms, for both splitting
/// schemes over a ladder of 1D step sizes, against a fine symmetric-split
/// reference trajectory.
fn splitting_convergence(ladder: &[f64]) -> Result<String, CliError> {
    const T_END_MS: f64 = 0.1;
    let reference =
        probe_stimulated_potential(Scheme::Strang, 2.5e-4, 2, T_END_MS).map_err(CliError::solver)?;

    let mut csv = String::from("dt_1d_ms,godunov_err,strang_err\n");
    for &dt_1d in ladder {
        let godunov = probe_stimulated_potential(Scheme::Godunov, dt_1d, 5, T_END_MS)
            .map_err(CliError::solver)?;
        let strang = probe_stimulated_potential(Scheme::Strang, dt_1d, 2, T_END_MS)
            .map_err(CliError::solver)?;
        writeln!(
            csv,
            "{dt_1d:e},{:e},{:e}",
            (godunov - reference).abs(),
            (strang - reference).abs()
        )
        .expect("writing to a string cannot fail");
    }
    Ok(csv)
}

/// One implicit diffusion system per fiber size, solved by each method;
/// reports the best-of-repetitions wall time and the solution disagreement
/// against direct elimination.
fn solver_comparison(sizes: &[usize]) -> Result<String, CliError> {
    const H_CM: f64 = 1e-3;
    const DT_MS: f64 = 5e-4;
    const REL_TOL: f64 = 1e-5;

    let mut csv =
        String::from("n,thomas_seconds,cg_seconds,gmres_seconds,cg_rel_diff,gmres_rel_diff\n");
    for &n in sizes {
        let length = (n - 1) as f64 * H_CM;
        let mesh = FiberMesh::uniform(n, length, 3.828, 500.0, 1.0);
        // Excitation-shaped bump: rest at −75 mV, +105 mV peak a third of the
        // way along, width 5% of the fiber.
        let center = 0.3 * length;
        let width = 0.05 * length;
        let v: Vec<f64> = (0..n)
            .map(|i| {
                let x = i as f64 * H_CM;
                let z = (x - center) / width;
                -75.0 + 105.0 * (-z * z).exp()
            })
            .collect();
        let system = build_implicit_euler_system(&v, DT_MS, &mesh).map_err(CliError::solver)?;

        let reps = (100_000 / n).max(3);
        let mut time_method = |method: SolveMethod| -> Result<(f64, Vec<f64>), CliError> {
            let mut best = f64::INFINITY;
            let mut solution = Vec::new();
            for _ in 0..reps {
                let start = Instant::now();
                solution = linear_solve(&system, method, REL_TOL).map_err(CliError::solver)?;
                best = best.min(start.elapsed().as_secs_f64());
            }
            Ok((best, solution))
        };

        let (t_thomas, x_thomas) = time_method(SolveMethod::Thomas)?;
        let (t_cg, x_cg) = time_method(SolveMethod::ConjugateGradient)?;
        let (t_gmres, x_gmres) = time_method(SolveMethod::Gmres { restart: 30 })?;

        let scale = x_thomas.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rel_diff = |x: &[f64]| {
            let d = x
                .iter()
                .zip(&x_thomas)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            d / scale
        };
        writeln!(
            csv,
            "{n},{t_thomas:e},{t_cg:e},{t_gmres:e},{:e},{:e}",
            rel_diff(&x_cg),
            rel_diff(&x_gmres)
        )
        .expect("writing to a string cannot fail");
    }
    Ok(csv)
}

/// Closed-form communication model of every ordered process grid that the
/// domain can hold, cheapest average boundary first. No simulation runs.
fn partition_sweep(workers: usize, domain: [usize; 3]) -> Result<String, CliError> {
    if workers == 0 {
        return Err(CliError::config("workers must be positive"));
    }
    let mut rows = Vec::new();
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
            let Ok(layout) = PartitionLayout::from_subdivisions(domain, p, Strategy::General)
            else {
                continue; // more parts than elements along some axis
            };
            let model = boundary_metrics(&layout);
            rows.push((model.average_boundary_area, p, model));
        }
    }
    if rows.is_empty() {
        return Err(CliError::config(format!(
            "no factorization of {workers} processes fits a {domain:?} domain"
        )));
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut csv = String::from(
        "p_x,p_y,p_z,average_boundary_area,total_interface_area,ghost_elements,\
         displacement_halo_bytes_per_exchange,fiber_cut_planes\n",
    );
    for (avg, p, model) in rows {
        let ghost: usize = model.ghost_elements.iter().sum();
        let halo_bytes =
            2 * model.total_interface_area as u64 * DISPLACEMENT_BYTES_PER_ELEMENT;
        writeln!(
            csv,
            "{},{},{},{avg},{},{ghost},{halo_bytes},{}",
            p[0], p[1], p[2], model.total_interface_area, model.fiber_cut_planes
        )
        .expect("writing to a string cannot fail");
    }
    Ok(csv)
}

/// Weak-scaling ladder from one worker up to `workers`, eight elements per
/// worker throughout. Timing columns vary run to run; the rest do not.
fn weak_scaling(workers: usize) -> Result<String, CliError> {
    if workers == 0 || !workers.is_power_of_two() {
        return Err(CliError::config(format!(
            "weak_scaling needs a power-of-two worker count, got {workers}"
        )));
    }
    let steps = workers.trailing_zeros() as usize + 1;
    let report = run_scaling_experiment(&weak_scaling_configs(steps))?;
    if let Some((config, reason)) = report.skipped.first() {
        return Err(CliError::config(format!(
            "ladder rung {} infeasible: {reason}",
            config.name
        )));
    }
    Ok(report.to_csv())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse_rows(csv: &str, columns: usize) -> Vec<Vec<String>> {
        let mut lines = csv.lines();
        let header = lines.next().unwrap();
        assert_eq!(header.split(',').count(), columns);
        lines
            .map(|l| {
                let row: Vec<String> = l.split(',').map(str::to_string).collect();
                assert_eq!(row.len(), columns, "{l}");
                row
            })
            .collect()
    }

    #[test]
    fn the_integrator_ladder_orders_euler_below_heun() {
        let csv = ode_convergence(&[4, 16, 64]).unwrap();
        let rows = parse_rows(&csv, 4);
        assert_eq!(rows.len(), 3);
        let errs: Vec<(f64, f64)> = rows
            .iter()
            .map(|r| (r[2].parse().unwrap(), r[3].parse().unwrap()))
            .collect();
        for (euler, heun) in &errs {
            assert!(heun < euler, "{heun} !< {euler}");
            assert!(*euler > 0.0 && *heun > 0.0);
        }
        // Refinement shrinks both errors across the ladder.
        assert!(errs[2].0 < errs[0].0 / 4.0);
        assert!(errs[2].1 < errs[0].1 / 16.0);
        assert_eq!(csv, ode_convergence(&[4, 16, 64]).unwrap(), "deterministic");
    }

    #[test]
    fn the_splitting_ladder_shrinks_toward_the_reference() {
        let csv = splitting_convergence(&[4e-3, 1e-3]).unwrap();
        let rows = parse_rows(&csv, 3);
        assert_eq!(rows.len(), 2);
        let coarse: f64 = rows[0][1].parse().unwrap();
        let fine: f64 = rows[1][1].parse().unwrap();
        assert!(fine < coarse, "first-order error must drop: {fine} !< {coarse}");
        assert_eq!(csv, splitting_convergence(&[4e-3, 1e-3]).unwrap());
    }

    #[test]
    fn the_solver_table_reports_tight_agreement() {
        let csv = solver_comparison(&[50, 400]).unwrap();
        let rows = parse_rows(&csv, 6);
        assert_eq!(rows.len(), 2);
        for row in &rows {
            let cg_diff: f64 = row[4].parse().unwrap();
            let gmres_diff: f64 = row[5].parse().unwrap();
            assert!(cg_diff < 1e-4, "cg drifted: {cg_diff}");
            assert!(gmres_diff < 1e-4, "gmres drifted: {gmres_diff}");
            for col in 1..4 {
                assert!(row[col].parse::<f64>().unwrap() > 0.0);
            }
        }
    }

    #[test]
    fn the_partition_sweep_is_sorted_and_deterministic() {
        let options = StudyOptions {
            workers: Some(8),
            domain: Some([8, 4, 4]),
        };
        let csv = run_study(StudyKind::PartitionSweep, &options).unwrap();
        let rows = parse_rows(&csv, 8);
        // 8 = 2³ has 10 ordered factor triples; all fit an [8,4,4] domain
        // except those cutting y or z into 8 parts.
        assert_eq!(rows.len(), 8);
        let areas: Vec<f64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
        assert!(areas.windows(2).all(|w| w[0] <= w[1]), "{areas:?}");
        // The balanced cube cuts the least area on this domain; the x-pillar
        // pays for seven cross-section planes.
        assert_eq!(rows[0][..3].join(","), "2,2,2");
        assert!(rows.iter().any(|r| r[..3].join(",") == "8,1,1"));
        assert_eq!(csv, run_study(StudyKind::PartitionSweep, &options).unwrap());

        // Halo bytes follow the interface area exactly.
        for row in &rows {
            let total: u64 = row[4].parse().unwrap();
            let bytes: u64 = row[6].parse().unwrap();
            assert_eq!(bytes, 2 * total * 192);
        }
    }

    #[test]
    fn the_weak_scaling_ladder_emits_one_block_per_rung() {
        let csv = weak_scaling(2).unwrap();
        let rows = parse_rows(&csv, 9);
        assert_eq!(rows.len(), 2 * 6, "two rungs, six components each");
        assert_eq!(rows[0][..2].join(","), "weak_1,1");
        assert_eq!(rows[6][..2].join(","), "weak_2,2");
        assert!(weak_scaling(3).is_err(), "non-power-of-two is a config error");
    }

    #[test]
    fn study_names_parse_like_the_csv_headers() {
        assert_eq!(
            "ode_convergence".parse::<StudyKind>().unwrap(),
            StudyKind::OdeConvergence
        );
        assert_eq!(
            "weak_scaling".parse::<StudyKind>().unwrap(),
            StudyKind::WeakScaling
        );
        assert!("smoke".parse::<StudyKind>().is_err());
    }
}
