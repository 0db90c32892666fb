//! Dataset inspection: open a recorded directory, verify that every payload
//! matches its header byte for byte, decode the first and last timesteps, and
//! print what the run was.

use std::fmt::Write as _;
use std::path::Path;

use musim_io::Dataset;

use crate::error::CliError;

/// Validates one dataset directory and renders a human-readable report.
pub fn inspect(dir: &Path) -> Result<String, CliError> {
    let ds = Dataset::open(dir)?;
    ds.validate_files()?;
    let header = ds.header();

    let mut out = String::new();
    let push = |out: &mut String, line: &str| {
        out.push_str(line);
        out.push('\n');
    };

    push(&mut out, &format!("dataset: {}", dir.display()));
    push(
        &mut out,
        &format!(
            "  format v{}, {} timesteps at {} ms cadence ({} ms span)",
            header.format_version,
            header.timesteps,
            header.dt,
            header.dt * header.timesteps.saturating_sub(1) as f64,
        ),
    );

    for attr in &header.attributes {
        push(
            &mut out,
            &format!(
                "  attribute {}: {} values/step, {} B/step, codec {:?} ({})",
                attr.name, attr.count, attr.bytes_per_timestep, attr.codec, attr.semantic
            ),
        );
        for (label, t) in [("first", 0), ("last", header.timesteps - 1)] {
            let values = ds.read_timestep(t, &attr.name)?;
            if values.iter().any(|v| !v.is_finite()) {
                return Err(CliError::io(format!(
                    "attribute {} holds a non-finite value at timestep {t}",
                    attr.name
                )));
            }
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &v in &values {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            push(
                &mut out,
                &format!("    {label} step range [{lo:.6}, {hi:.6}]"),
            );
        }
        if header.tid.is_some() {
            let tid = ds.read_tid(&attr.name)?;
            if tid.len() != attr.count * 3 && tid.len() != attr.count {
                return Err(CliError::io(format!(
                    "site table of {} has {} entries for {} values",
                    attr.name,
                    tid.len(),
                    attr.count
                )));
            }
            push(
                &mut out,
                &format!("    sites: {} coordinates on file", tid.len()),
            );
        } else {
            push(&mut out, "    sites: none recorded");
        }
    }

    match ds.read_type_header()? {
        Some(value) => {
            let rendered = serde_json::to_string(&value).expect("json re-serializes");
            push(&mut out, &format!("  provenance: {rendered}"));
        }
        None => push(&mut out, "  provenance: none recorded"),
    }

    match ds.read_dd()? {
        Some(dd) => {
            dd.validate()?;
            let p = dd.layout.subdivisions;
            push(
                &mut out,
                &format!(
                    "  decomposition: {} workers as {}x{}x{} over {:?} elements",
                    dd.layout.n_partitions(),
                    p[0],
                    p[1],
                    p[2],
                    dd.layout.domain
                ),
            );
            for load in &dd.loads {
                let seconds = load.component_seconds.get("total").copied().unwrap_or(0.0);
                push(
                    &mut out,
                    &format!(
                        "    worker {}: {} elements, {:.3} s total",
                        load.worker, load.elements, seconds
                    ),
                );
            }
            let mut heads = dd.fiber_workers.clone();
            heads.sort_unstable();
            heads.dedup();
            push(
                &mut out,
                &format!(
                    "    {} fibers led by {} distinct workers",
                    dd.fiber_workers.len(),
                    heads.len()
                ),
            );
            if let Some(seed) = dd.stimulus_seed {
                push(&mut out, &format!("    stimulus targets drawn with seed {seed}"));
            }
        }
        None => push(&mut out, "  decomposition: none recorded"),
    }

    push(&mut out, "  payloads verified byte-exact against the header");
    Ok(out)
}

/// Inspects several directories, concatenating the reports.
pub fn inspect_all(dirs: &[impl AsRef<Path>]) -> Result<String, CliError> {
    let mut out = String::new();
    for (i, dir) in dirs.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        write!(out, "{}", inspect(dir.as_ref())?).expect("writing to a string cannot fail");
    }
    Ok(out)
}
