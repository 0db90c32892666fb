//! Scenario configuration: a TOML file whose defaults reproduce the standard
//! cubic-muscle twitch — a 1 cm³ box of 2×2×2 trilinear elements, 36 fibers
//! in a 6×6 cross-section grid with 31 nodes each, a 0.1 ms midpoint
//! stimulus, and a 10 ms horizon.

use std::fs;
use std::path::{Path, PathBuf};

use musim_core::cell::{CellParams, HodgkinHuxley, StimulusProtocol};
use musim_core::fiber::FiberMesh;
use musim_core::mechanics::{MaterialParams, MuscleMesh, NewtonOptions};
use musim_core::partition::{factorize, PartitionLayout, Strategy};
use musim_core::splitting::{DiffusionMethod, OdeMethod, Scheme, SplittingSchedule};
use musim_core::transfer::FiberLayout;
use musim_io::CodecId;
use musim_runtime::parallel::CoupledScenario;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Recordable attribute names, in dataset order.
pub const ATTRIBUTES: [&str; 4] = ["v_m", "gamma_bar", "displacement", "l_hs"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    /// Simulated horizon, ms; must be a whole number of mechanics steps.
    pub t_end_ms: f64,
    pub domain: DomainConfig,
    pub fibers: FiberConfig,
    pub schedule: ScheduleConfig,
    pub stimulus: StimulusConfig,
    pub cell: CellConfig,
    pub material: MaterialConfig,
    pub partition: PartitionConfig,
    pub output: OutputConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "single_twitch".to_string(),
            t_end_ms: 10.0,
            domain: DomainConfig::default(),
            fibers: FiberConfig::default(),
            schedule: ScheduleConfig::default(),
            stimulus: StimulusConfig::default(),
            cell: CellConfig::default(),
            material: MaterialConfig::default(),
            partition: PartitionConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainConfig {
    /// Elements per axis; fibers run along the first axis.
    pub elements: [usize; 3],
    pub lengths_cm: [f64; 3],
}

impl Default for DomainConfig {
    fn default() -> Self {
        Self {
            elements: [2, 2, 2],
            lengths_cm: [1.0, 1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FiberConfig {
    /// Fibers per element in the two cross-section directions.
    pub per_element: [usize; 2],
    pub nodes_per_fiber: usize,
    /// Effective conductivity, mS/cm.
    pub sigma_eff: f64,
    /// Surface-to-volume ratio, 1/cm.
    pub a_m: f64,
}

impl Default for FiberConfig {
    fn default() -> Self {
        Self {
            per_element: [3, 3],
            nodes_per_fiber: 31,
            sigma_eff: 3.828,
            a_m: 500.0,
        }
    }
}

/// Time hierarchy. Unset fields take the chosen scheme's production default
/// (Godunov: dt_0d = 1e-4 ms, k = 5, n = 2000, Euler + implicit Euler;
/// Strang: dt_0d = 1e-3 ms, k = 2, n = 500, Heun + Crank–Nicolson).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub scheme: Scheme,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt_0d_ms: Option<f64>,
    /// Membrane substeps per diffusion step.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<u32>,
    /// Diffusion steps per mechanics step.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ode_method: Option<OdeMethod>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diffusion_method: Option<DiffusionMethod>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Godunov,
            dt_0d_ms: None,
            k: None,
            n: None,
            ode_method: None,
            diffusion_method: None,
        }
    }
}

impl ScheduleConfig {
    pub fn resolve(&self) -> Result<SplittingSchedule, CliError> {
        let base = SplittingSchedule::default_for(self.scheme);
        let schedule = SplittingSchedule {
            dt_0d: self.dt_0d_ms.unwrap_or(base.dt_0d),
            k: self.k.unwrap_or(base.k),
            n: self.n.unwrap_or(base.n),
            scheme: self.scheme,
            ode_method: self.ode_method.unwrap_or(base.ode_method),
            diffusion_method: self.diffusion_method.unwrap_or(base.diffusion_method),
        };
        schedule.validate().map_err(CliError::config)?;
        Ok(schedule)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StimulusConfig {
    /// Pulse amplitude, µA/cm².
    pub amplitude: f64,
    pub t_on_ms: f64,
    pub t_off_ms: f64,
    /// Stimulated node indices; empty means the fiber midpoint.
    pub targets: Vec<usize>,
    /// Draw this many distinct random target nodes instead (demo scenarios).
    pub random_targets: usize,
    /// Seed of the random draw; recorded in the dataset sidecar.
    pub seed: u64,
}

impl Default for StimulusConfig {
    fn default() -> Self {
        Self {
            amplitude: 1200.0,
            t_on_ms: 0.0,
            t_off_ms: 0.1,
            targets: Vec::new(),
            random_targets: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CellConfig {
    /// Membrane capacitance, µF/cm².
    pub c_m: f64,
    /// Cross-bridge relaxation time, ms.
    pub tau_a2: f64,
    /// Half-activation potential, mV.
    pub v_half: f64,
    /// Activation slope, mV.
    pub k_act: f64,
    /// Optimal half-sarcomere length, µm.
    pub l_opt: f64,
    /// Force–length tent half-width, fraction of `l_opt`.
    pub fl_width: f64,
}

impl Default for CellConfig {
    fn default() -> Self {
        let p = CellParams::<HodgkinHuxley>::default();
        Self {
            c_m: p.c_m,
            tau_a2: p.tau_a2,
            v_half: p.v_half,
            k_act: p.k_act,
            l_opt: p.l_opt,
            fl_width: p.fl_width,
        }
    }
}

impl CellConfig {
    pub fn params(&self) -> Result<CellParams, CliError> {
        let params = CellParams {
            c_m: self.c_m,
            membrane: HodgkinHuxley::default(),
            a2_min: 0.0,
            a2_max: 1.0,
            tau_a2: self.tau_a2,
            v_half: self.v_half,
            k_act: self.k_act,
            l_opt: self.l_opt,
            fl_width: self.fl_width,
        }
        .calibrate_resting_offset();
        params.validate().map_err(CliError::config)?;
        Ok(params)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaterialConfig {
    pub c1: f64,
    pub c2: f64,
    pub b: f64,
    pub kappa: f64,
    pub sigma_max: f64,
}

impl Default for MaterialConfig {
    fn default() -> Self {
        let p = MaterialParams::default();
        Self {
            c1: p.c1,
            c2: p.c2,
            b: p.b,
            kappa: p.kappa,
            sigma_max: p.sigma_max,
        }
    }
}

impl MaterialConfig {
    pub fn params(&self) -> Result<MaterialParams, CliError> {
        let params = MaterialParams {
            c1: self.c1,
            c2: self.c2,
            b: self.b,
            kappa: self.kappa,
            sigma_max: self.sigma_max,
        };
        params.validate().map_err(CliError::config)?;
        Ok(params)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub workers: usize,
    pub strategy: Strategy,
    /// Explicit partitions per axis; product must equal `workers`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subdivisions: Option<[usize; 3]>,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            workers: 1,
            strategy: Strategy::Cubic,
            subdivisions: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecChoice {
    /// Little-endian f64, bit-exact.
    Raw,
    /// 8-bit linear quantization over the attribute's physical range.
    Q8,
    /// 16-bit linear quantization over the attribute's physical range.
    Q16,
}

impl CodecChoice {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "raw" => Ok(Self::Raw),
            "q8" => Ok(Self::Q8),
            "q16" => Ok(Self::Q16),
            other => Err(CliError::config(format!(
                "unknown codec {other:?}; expected raw, q8, or q16"
            ))),
        }
    }

    /// Codec for one attribute; quantized ranges cover each field's physical
    /// excursion with margin.
    pub fn codec_for(self, attribute: &str, l_opt: f64) -> Result<CodecId, CliError> {
        let bits = match self {
            Self::Raw => return Ok(CodecId::RawF64),
            Self::Q8 => 8,
            Self::Q16 => 16,
        };
        let (min, max) = match attribute {
            "v_m" => (-120.0, 80.0),
            "gamma_bar" => (0.0, 1.0),
            "displacement" => (-1.0, 1.0),
            "l_hs" => (0.0, 4.0 * l_opt),
            other => {
                return Err(CliError::config(format!("unknown attribute {other:?}")));
            }
        };
        Ok(CodecId::Quantized { bits, min, max })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: PathBuf,
    pub codec: CodecChoice,
    pub attributes: Vec<String>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("musim_out"),
            codec: CodecChoice::Raw,
            attributes: ATTRIBUTES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Command-line overrides applied onto a parsed config before resolution.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub workers: Option<usize>,
    pub scheme: Option<Scheme>,
    pub out: Option<PathBuf>,
    pub codec: Option<CodecChoice>,
}

/// Everything `run` needs, validated and constructed.
pub struct ResolvedScenario {
    pub name: String,
    pub scenario: CoupledScenario,
    pub layout: PartitionLayout,
    pub coupling_steps: usize,
    pub out_dir: PathBuf,
    pub codec: CodecChoice,
    pub attributes: Vec<String>,
    pub stimulus_seed: Option<u64>,
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(CliError::config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn apply(&mut self, overrides: &Overrides) {
        if let Some(w) = overrides.workers {
            self.partition.workers = w;
            // An explicit grid for a different worker count no longer applies.
            if let Some(s) = self.partition.subdivisions {
                if s.iter().product::<usize>() != w {
                    self.partition.subdivisions = None;
                }
            }
        }
        if let Some(s) = overrides.scheme {
            self.schedule.scheme = s;
        }
        if let Some(out) = &overrides.out {
            self.output.directory = out.clone();
        }
        if let Some(c) = overrides.codec {
            self.output.codec = c;
        }
    }

    /// Stimulated node indices: explicit targets, a seeded random draw, or
    /// the fiber midpoint. Returns the seed when randomness was used.
    fn stimulus_targets(&self, npf: usize) -> Result<(Vec<usize>, Option<u64>), CliError> {
        let s = &self.stimulus;
        if !s.targets.is_empty() && s.random_targets > 0 {
            return Err(CliError::config(
                "stimulus.targets and stimulus.random_targets are mutually exclusive",
            ));
        }
        if !s.targets.is_empty() {
            if let Some(&bad) = s.targets.iter().find(|&&t| t >= npf) {
                return Err(CliError::config(format!(
                    "stimulus target {bad} outside the fiber (nodes 0..{npf})"
                )));
            }
            return Ok((s.targets.clone(), None));
        }
        if s.random_targets > 0 {
            if s.random_targets > npf {
                return Err(CliError::config(format!(
                    "cannot draw {} distinct targets from {npf} nodes",
                    s.random_targets
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
            let mut picks = rand::seq::index::sample(&mut rng, npf, s.random_targets).into_vec();
            picks.sort_unstable();
            return Ok((picks, Some(s.seed)));
        }
        Ok((vec![npf / 2], None))
    }

    pub fn resolve(&self) -> Result<ResolvedScenario, CliError> {
        let schedule = self.schedule.resolve()?;
        let dt_3d = schedule.dt_0d * schedule.k as f64 * schedule.n as f64;
        let steps = (self.t_end_ms / dt_3d).round();
        if steps < 1.0 || (steps * dt_3d - self.t_end_ms).abs() > 1e-9 * self.t_end_ms.max(dt_3d) {
            return Err(CliError::config(format!(
                "t_end_ms = {} is not a whole number of {dt_3d} ms mechanics steps",
                self.t_end_ms
            )));
        }
        let coupling_steps = steps as usize;

        let mesh = MuscleMesh::box_grid(
            self.domain.elements,
            self.domain.lengths_cm,
            [1.0, 0.0, 0.0],
        )
        .map_err(CliError::config)?;

        let npf = self.fibers.nodes_per_fiber;
        let fibers = FiberLayout::new(
            self.fibers.per_element[0] * self.domain.elements[1],
            self.fibers.per_element[1] * self.domain.elements[2],
            npf,
        );
        fibers.validate().map_err(CliError::config)?;

        let params = self.cell.params()?;
        let fiber_mesh = FiberMesh::uniform(
            npf,
            self.domain.lengths_cm[0],
            self.fibers.sigma_eff,
            self.fibers.a_m,
            params.c_m,
        );
        fiber_mesh.validate().map_err(CliError::config)?;

        let (targets, stimulus_seed) = self.stimulus_targets(npf)?;
        let stimulus = StimulusProtocol {
            amplitude: self.stimulus.amplitude,
            t_on: self.stimulus.t_on_ms,
            t_off: self.stimulus.t_off_ms,
            target: targets,
        };
        stimulus.validate().map_err(CliError::config)?;

        let material = self.material.params()?;

        let layout = match self.partition.subdivisions {
            Some(subs) => {
                if subs.iter().product::<usize>() != self.partition.workers {
                    return Err(CliError::config(format!(
                        "subdivisions {subs:?} use {} workers, config says {}",
                        subs.iter().product::<usize>(),
                        self.partition.workers
                    )));
                }
                PartitionLayout::from_subdivisions(
                    self.domain.elements,
                    subs,
                    self.partition.strategy,
                )
            }
            None => factorize(
                self.partition.workers,
                self.domain.elements,
                self.partition.strategy,
            ),
        }
        .map_err(CliError::config)?;

        let mut seen = Vec::new();
        for name in &self.output.attributes {
            if !ATTRIBUTES.contains(&name.as_str()) {
                return Err(CliError::config(format!(
                    "unknown attribute {name:?}; expected one of {ATTRIBUTES:?}"
                )));
            }
            if seen.contains(name) {
                return Err(CliError::config(format!("duplicate attribute {name:?}")));
            }
            seen.push(name.clone());
        }
        if seen.is_empty() {
            return Err(CliError::config("output.attributes must not be empty"));
        }

        let scenario = CoupledScenario {
            schedule,
            params,
            stimulus,
            fiber_mesh,
            mesh,
            fibers,
            material,
            newton: NewtonOptions::default(),
        };

        Ok(ResolvedScenario {
            name: self.name.clone(),
            scenario,
            layout,
            coupling_steps,
            out_dir: self.output.directory.clone(),
            codec: self.output.codec,
            attributes: seen,
            stimulus_seed,
        })
    }
}

pub fn parse_scheme(s: &str) -> Result<Scheme, CliError> {
    match s {
        "godunov" => Ok(Scheme::Godunov),
        "strang" => Ok(Scheme::Strang),
        other => Err(CliError::config(format!(
            "unknown scheme {other:?}; expected godunov or strang"
        ))),
    }
}

pub fn parse_strategy(s: &str) -> Result<Strategy, CliError> {
    match s {
        "pillar" => Ok(Strategy::Pillar),
        "cubic" => Ok(Strategy::Cubic),
        "general" => Ok(Strategy::General),
        other => Err(CliError::config(format!(
            "unknown strategy {other:?}; expected pillar, cubic, or general"
        ))),
    }
}
