//! Coupled runs: execute a resolved scenario on the threaded runtime, record
//! the trajectory into a dataset directory at the mechanics cadence, and
//! summarize the run.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use musim_core::mechanics::{shape_values, MuscleMesh, GAUSS_POINTS};
use musim_core::splitting::WorldState;
use musim_core::transfer::FiberLayout;
use musim_io::{Attribute, Dataset, DatasetHeader, DdMetadata, IoError, LoadRecord};
use musim_runtime::parallel::run_parallel_recorded;
use serde::Serialize;

use crate::config::ResolvedScenario;
use crate::error::CliError;

/// What `run` reports on stdout and into `summary.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub name: String,
    pub dataset_dir: PathBuf,
    pub workers: usize,
    pub subdivisions: [usize; 3],
    pub coupling_steps: usize,
    pub dt_3d_ms: f64,
    pub peak_abs_v_m: f64,
    pub peak_gamma_bar: f64,
    pub newton_iterations_total: usize,
    pub newton_iterations_max: usize,
    /// Per component, the maximum wall seconds over workers.
    pub component_seconds: BTreeMap<String, f64>,
    pub displacement_halo_bytes: u64,
    pub vm_interface_bytes: u64,
}

fn attribute_count(name: &str, mesh: &MuscleMesh, fibers: &FiberLayout) -> usize {
    match name {
        "v_m" | "l_hs" => fibers.n_nodes(),
        "gamma_bar" => mesh.n_elements() * 8,
        "displacement" => mesh.n_nodes() * 3,
        _ => unreachable!("attribute names are validated at resolution"),
    }
}

fn attribute_semantic(name: &str) -> &'static str {
    match name {
        "v_m" => "membrane_potential_mv",
        "gamma_bar" => "element_activation",
        "displacement" => "nodal_displacement_cm",
        "l_hs" => "half_sarcomere_length_um",
        _ => unreachable!("attribute names are validated at resolution"),
    }
}

fn attribute_values(name: &str, world: &WorldState) -> Vec<f64> {
    match name {
        "v_m" => world
            .fibers
            .iter()
            .flat_map(|f| f.v.iter().copied())
            .collect(),
        "gamma_bar" => world.gamma_bar.clone(),
        "displacement" => world
            .displacement
            .u
            .iter()
            .flat_map(|p| p.iter().copied())
            .collect(),
        "l_hs" => world.l_hs.clone(),
        _ => unreachable!("attribute names are validated at resolution"),
    }
}

/// Reference positions of an attribute's sample sites, flattened xyz.
fn attribute_sites(name: &str, mesh: &MuscleMesh, fibers: &FiberLayout) -> Vec<f64> {
    let mut out = Vec::new();
    match name {
        "v_m" | "l_hs" => {
            for fiber in 0..fibers.n_fibers() {
                for node in 0..fibers.nodes_per_fiber {
                    out.extend(fibers.node_position(mesh, fiber, node));
                }
            }
        }
        "gamma_bar" => {
            for e in 0..mesh.n_elements() {
                let nodes = mesh.element_nodes(e);
                for xi in &GAUSS_POINTS {
                    let shape = shape_values(xi);
                    let mut x = [0.0; 3];
                    for (a, &node) in nodes.iter().enumerate() {
                        for (xc, nc) in x.iter_mut().zip(&mesh.node_coords[node]) {
                            *xc += shape[a] * nc;
                        }
                    }
                    out.extend(x);
                }
            }
        }
        "displacement" => {
            for coords in &mesh.node_coords {
                out.extend(coords);
            }
        }
        _ => unreachable!("attribute names are validated at resolution"),
    }
    out
}

fn write_world(
    ds: &mut Dataset,
    timestep: usize,
    world: &WorldState,
    attributes: &[String],
) -> Result<(), IoError> {
    for name in attributes {
        let values = attribute_values(name, world);
        ds.write_timestep(timestep, name, &values, 0..values.len())?;
    }
    Ok(())
}

pub fn execute(resolved: &ResolvedScenario) -> Result<RunSummary, CliError> {
    let scenario = &resolved.scenario;
    let schedule = scenario.schedule;
    let dt_3d = schedule.dt_0d * schedule.k as f64 * schedule.n as f64;
    let steps = resolved.coupling_steps;

    // The serial constructor provides the validated initial world state.
    let (_, world0) = scenario.serial()?;

    let l_opt = scenario.params.l_opt;
    let attrs = resolved
        .attributes
        .iter()
        .map(|name| {
            Ok(Attribute::new(
                name.clone(),
                attribute_semantic(name),
                attribute_count(name, &scenario.mesh, &scenario.fibers),
                resolved.codec.codec_for(name, l_opt)?,
            ))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let header = DatasetHeader::new(attrs, steps + 1, dt_3d);
    let mut ds = Dataset::create(&resolved.out_dir, header)?;

    for name in &resolved.attributes {
        ds.write_tid(name, &attribute_sites(name, &scenario.mesh, &scenario.fibers))?;
    }
    ds.write_type_header(&serde_json::json!({
        "scenario": resolved.name,
        "scheme": scenario.schedule.scheme,
        "dt_0d_ms": schedule.dt_0d,
        "k": schedule.k,
        "n": schedule.n,
        "t_end_ms": dt_3d * steps as f64,
        "stimulus": {
            "amplitude": scenario.stimulus.amplitude,
            "t_on_ms": scenario.stimulus.t_on,
            "t_off_ms": scenario.stimulus.t_off,
            "targets": scenario.stimulus.target,
        },
    }))?;

    write_world(&mut ds, 0, &world0, &resolved.attributes)?;
    let mut peak_v = world0
        .fibers
        .iter()
        .flat_map(|f| f.v.iter())
        .fold(0.0f64, |m, &v| m.max(v.abs()));
    let mut peak_gamma = 0.0f64;
    let mut write_error: Option<IoError> = None;

    let outcome = run_parallel_recorded(scenario, &resolved.layout, steps, &mut |s, world| {
        if write_error.is_none() {
            if let Err(e) = write_world(&mut ds, s + 1, world, &resolved.attributes) {
                write_error = Some(e);
            }
        }
        for f in &world.fibers {
            for &v in &f.v {
                peak_v = peak_v.max(v.abs());
            }
        }
        for &g in &world.gamma_bar {
            peak_gamma = peak_gamma.max(g);
        }
    })?;
    if let Some(e) = write_error {
        return Err(e.into());
    }

    let loads = outcome
        .report
        .workers
        .iter()
        .map(|w| LoadRecord {
            worker: w.rank,
            timestep: steps,
            component_seconds: w
                .components()
                .iter()
                .map(|(name, m)| (name.to_string(), m.seconds))
                .collect(),
            elements: outcome.elements_per_worker[w.rank],
        })
        .collect();
    ds.write_dd(&DdMetadata {
        layout: resolved.layout.clone(),
        loads,
        fiber_workers: outcome.fiber_workers.clone(),
        stimulus_seed: resolved.stimulus_seed,
    })?;

    let mut component_seconds = BTreeMap::new();
    for w in &outcome.report.workers {
        for (name, m) in w.components() {
            let slot = component_seconds.entry(name.to_string()).or_insert(0.0f64);
            *slot = slot.max(m.seconds);
        }
    }

    let summary = RunSummary {
        name: resolved.name.clone(),
        dataset_dir: resolved.out_dir.clone(),
        workers: resolved.layout.n_partitions(),
        subdivisions: resolved.layout.subdivisions,
        coupling_steps: steps,
        dt_3d_ms: dt_3d,
        peak_abs_v_m: peak_v,
        peak_gamma_bar: peak_gamma,
        newton_iterations_total: outcome.newton_iterations.iter().sum(),
        newton_iterations_max: outcome.newton_iterations.iter().copied().max().unwrap_or(0),
        component_seconds,
        displacement_halo_bytes: outcome.report.displacement_bytes(),
        vm_interface_bytes: outcome.report.vm_interface_bytes(),
    };
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(resolved.out_dir.join("summary.json"), text)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{CodecChoice, Overrides, ScenarioConfig};

    /// Two coupling steps on a light schedule: enough to exercise recording,
    /// cheap enough for a unit test.
    fn light_config(dir: &std::path::Path) -> ScenarioConfig {
        ScenarioConfig::parse(&format!(
            r#"
            t_end_ms = 0.4
            [schedule]
            dt_0d_ms = 0.005
            k = 10
            n = 4
            [output]
            directory = "{}"
            "#,
            dir.display()
        ))
        .unwrap()
    }

    #[test]
    fn recorded_datasets_hold_the_whole_trajectory() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("ds");
        let cfg = light_config(&out);
        let summary = execute(&cfg.resolve().unwrap()).unwrap();
        assert_eq!(summary.coupling_steps, 2);
        assert!(summary.peak_abs_v_m > 75.0, "stimulus must excite the cells");
        assert!(summary.peak_gamma_bar > 0.0);
        assert_eq!(summary.workers, 1);
        assert!(summary.vm_interface_bytes == 0, "one worker cuts nothing");

        let ds = Dataset::open(&out).unwrap();
        ds.validate_files().unwrap();
        assert_eq!(ds.header().timesteps, 3);
        let v0 = ds.read_timestep(0, "v_m").unwrap();
        let v2 = ds.read_timestep(2, "v_m").unwrap();
        assert_eq!(v0.len(), 36 * 31);
        assert!(v0.iter().all(|&v| (v - v0[0]).abs() < 1e-12), "rest is uniform");
        assert!(v2 != v0, "the twitch must move the potential");
        let dd = ds.read_dd().unwrap().unwrap();
        dd.validate().unwrap();
        assert_eq!(dd.fiber_workers, vec![0; 36]);
        let tid = ds.read_tid("v_m").unwrap();
        assert_eq!(tid.len(), 36 * 31 * 3);
        assert!(fs::metadata(out.join("summary.json")).is_ok());
    }

    #[test]
    fn existing_datasets_are_not_overwritten() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("ds");
        let cfg = light_config(&out);
        execute(&cfg.resolve().unwrap()).unwrap();
        let again = execute(&cfg.resolve().unwrap()).unwrap_err();
        assert_eq!(again.exit_code(), 4);
    }

    #[test]
    fn quantized_output_stays_within_codec_error() {
        let tmp = tempfile::tempdir().unwrap();
        let raw_dir = tmp.path().join("raw");
        let q_dir = tmp.path().join("q16");
        let cfg = light_config(&raw_dir);
        execute(&cfg.resolve().unwrap()).unwrap();
        let mut qcfg = light_config(&q_dir);
        qcfg.apply(&Overrides {
            codec: Some(CodecChoice::Q16),
            ..Overrides::default()
        });
        execute(&qcfg.resolve().unwrap()).unwrap();

        let raw = Dataset::open(&raw_dir).unwrap();
        let q = Dataset::open(&q_dir).unwrap();
        let codec = &q.header().attributes[0].codec;
        assert!(matches!(codec, musim_io::CodecId::Quantized { bits: 16, .. }));
        let bound = codec.max_abs_error();
        for t in 0..3 {
            let a = raw.read_timestep(t, "v_m").unwrap();
            let b = q.read_timestep(t, "v_m").unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= bound, "{x} vs {y} exceeds {bound}");
            }
        }
    }
}
