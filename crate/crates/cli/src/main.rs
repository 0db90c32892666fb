use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use musim_cli::config::{parse_scheme, parse_strategy, CodecChoice, Overrides, ScenarioConfig};
use musim_cli::error::CliError;
use musim_cli::study::{StudyKind, StudyOptions};
use musim_cli::{inspect, plan, run, study};

#[derive(Parser)]
#[command(name = "musim", version, about = "Multiscale skeletal-muscle simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a coupled scenario and record its trajectory as a dataset.
    Run {
        /// Scenario TOML; defaults describe the standard cubic-muscle twitch.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Worker thread count, overriding the config.
        #[arg(long)]
        workers: Option<usize>,
        /// Splitting scheme (godunov | strang), overriding the config.
        #[arg(long)]
        scheme: Option<String>,
        /// Dataset directory, overriding the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Value codec (raw | q8 | q16), overriding the config.
        #[arg(long)]
        codec: Option<String>,
        /// Print the fully resolved config instead of running.
        #[arg(long)]
        print_config: bool,
    },
    /// Reproduce a numerical study and write its CSV table.
    Study {
        /// ode_convergence | splitting_convergence | solver_comparison |
        /// partition_sweep | weak_scaling
        kind: String,
        /// Destination file; stdout when omitted.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Process count (partition_sweep, weak_scaling).
        #[arg(long)]
        workers: Option<usize>,
        /// Element grid as x,y,z (partition_sweep).
        #[arg(long, value_delimiter = ',', num_args = 3)]
        domain: Option<Vec<usize>>,
    },
    /// Validate recorded datasets and describe their contents.
    Inspect {
        /// Dataset directories.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
    /// Choose a process grid for a domain and report its communication.
    Plan {
        #[arg(long)]
        workers: usize,
        /// Element grid as x,y,z.
        #[arg(long, value_delimiter = ',', num_args = 3, required = true)]
        domain: Vec<usize>,
        /// pillar | cubic | general
        #[arg(long, default_value = "cubic")]
        strategy: String,
        /// Penalty per idle process; allows using fewer than --workers.
        #[arg(long)]
        unused_weight: Option<f64>,
    },
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run {
            config,
            workers,
            scheme,
            out,
            codec,
            print_config,
        } => {
            let mut cfg = match config {
                Some(path) => ScenarioConfig::load(&path)?,
                None => ScenarioConfig::default(),
            };
            let overrides = Overrides {
                workers,
                scheme: scheme.as_deref().map(parse_scheme).transpose()?,
                out,
                codec: codec.as_deref().map(CodecChoice::parse).transpose()?,
            };
            cfg.apply(&overrides);
            if print_config {
                cfg.resolve()?; // reject anything a run would reject
                print!("{}", cfg.to_toml());
                return Ok(());
            }
            let summary = run::execute(&cfg.resolve()?)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).expect("summary serializes")
            );
            Ok(())
        }
        Command::Study {
            kind,
            csv,
            workers,
            domain,
        } => {
            let kind: StudyKind = kind.parse()?;
            let options = StudyOptions {
                workers,
                domain: domain.map(|d| [d[0], d[1], d[2]]),
            };
            let table = study::run_study(kind, &options)?;
            match csv {
                Some(path) => std::fs::write(&path, table)?,
                None => print!("{table}"),
            }
            Ok(())
        }
        Command::Inspect { dirs } => {
            let report = inspect::inspect_all(&dirs)?;
            print!("{report}");
            Ok(())
        }
        Command::Plan {
            workers,
            domain,
            strategy,
            unused_weight,
        } => {
            let report = plan::plan(
                workers,
                [domain[0], domain[1], domain[2]],
                parse_strategy(&strategy)?,
                unused_weight,
            )?;
            print!("{report}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
