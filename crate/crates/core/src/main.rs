use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fedadapt::experiments::{self, ExperimentConfig, SweepAxis};
use fedadapt::model::ModelSpec;
use fedadapt::simnet::Engine;
use fedadapt::Error;

#[derive(Parser)]
#[command(name = "fedadapt", version, about = "Federated online adaptation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum EngineArg {
    Reference,
    Parallel,
}

impl From<EngineArg> for Engine {
    fn from(e: EngineArg) -> Self {
        match e {
            EngineArg::Reference => Engine::Reference,
            EngineArg::Parallel => Engine::Parallel,
        }
    }
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `[output] dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    engine: Option<EngineArg>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write frames.csv, summary.csv and traffic.csv.
    Run(Common),
    /// Run the same experiment for several values of one axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// T, num_clients or fed_mode.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Check a config without running it.
    Validate(Common),
    /// Run the finite-difference and degeneracy oracles.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
}

const DEFAULT_ORACLE_CONFIG: &str = r#"
mode = "full"

[warmup]
domain = "synthetic"
steps = 500

[[domains]]
name = "synthetic"

[[domains]]
name = "city"

[listener]
sequence = [{ domain = "city", frames = 300 }]
"#;

fn load(common: &Common, fallback: Option<&str>) -> Result<ExperimentConfig, Error> {
    let mut cfg = match (&common.config, fallback) {
        (Some(path), _) => ExperimentConfig::from_path(path).map_err(|e| match e {
            Error::Io(io) => Error::Config {
                field: path.display().to_string(),
                message: io.to_string(),
            },
            other => other,
        })?,
        (None, Some(text)) => ExperimentConfig::from_toml_str(text)?,
        (None, None) => {
            return Err(Error::Config {
                field: "--config".into(),
                message: "a config file is required".into(),
            })
        }
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(engine) = common.engine {
        cfg.engine = engine.into();
    }
    if let Some(out) = &common.out {
        cfg.output.dir = Some(out.clone());
    }
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output.dir.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn execute(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Run(common) => {
            let cfg = load(&common, None)?;
            let out = experiments::run_experiment(&cfg, cfg.engine)?;
            let dir = out_dir(&cfg);
            out.write_to(&dir)?;
            print!("{}", out.summary_csv);
            eprintln!("wrote {}", dir.display());
            Ok(true)
        }
        Command::Sweep { common, axis, values } => {
            let cfg = load(&common, None)?;
            let axis = SweepAxis::parse(&axis)?;
            let points = experiments::run_sweep(&cfg, axis, &values, cfg.engine)?;
            let text = experiments::sweep_csv(axis, &points)?;
            let dir = out_dir(&cfg);
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join("sweep.csv"), &text)?;
            print!("{text}");
            Ok(true)
        }
        Command::Validate(common) => {
            let cfg = load(&common, None)?;
            let sim = cfg.build()?;
            println!(
                "ok: mode {}, {} listener frames, {} active clients, {} parameters",
                cfg.mode.name(),
                sim.listener.sequence.len() * sim.listener_passes,
                sim.actives.len(),
                sim.w0.total_param_count()
            );
            Ok(true)
        }
        Command::Oracle { common, instances } => {
            let cfg = load(&common, Some(DEFAULT_ORACLE_CONFIG))?;
            let spec = cfg.model_spec()?;
            let checks = [
                experiments::finite_difference_check(ModelSpec { seed: cfg.seed, ..spec }, instances, cfg.seed)?,
                experiments::degeneracy_check(&cfg, cfg.engine)?,
            ];
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            Ok(checks.iter().all(|c| c.passed))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Invariant(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
