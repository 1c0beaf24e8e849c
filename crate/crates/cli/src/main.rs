//! `ncrough`: moments, path simulation, rough integrals, rough SDE solves and
//! the scripted studies.
//!
//! Exit codes: 0 pass, 2 usage, 3 a study check failed, 4 numeric failure.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use commands::{Artifacts, IntegrateConfig, SimulateConfig, SolveConfig, Study, StudyName};
use config::RunConfig;
use ncrough::experiments::{
    AreaConvergenceConfig, BgConfig, BoundsConfig, ItoFormulaConfig, ItoStratoConfig, NonextensionConfig,
    SolutionConvergenceConfig,
};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failed(Vec<String>),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<ncrough::Error> for CliError {
    fn from(e: ncrough::Error) -> Self {
        match e.exit_code() {
            4 => CliError::Numeric(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "ncrough", version, about = "Non-commutative rough paths on GUE matrix models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Moments of q-Gaussian semicircular variables: pairing sums against the ν_q density.
    Moments {
        #[arg(long, allow_hyphen_values = true)]
        q: f64,
        #[arg(long, default_value_t = 8)]
        order: usize,
        /// Also write the table to this CSV file.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Simulate a free Brownian motion path in the GUE model.
    Simulate(RunArgs),
    /// Integrate ∂f(X)♯dX against the Stratonovich and Itô areas.
    Integrate(RunArgs),
    /// Solve dY = Σ f_i(Y)·dX·g_i(Y).
    Solve(RunArgs),
    /// Run one of the scripted studies.
    Study {
        #[arg(value_enum)]
        name: StudyName,
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
    /// Overrides as `--key value` with dot-paths into the configuration.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

impl RunArgs {
    /// `--config` and `--print-config` may also appear among the overrides.
    fn split(&self) -> Result<(Option<PathBuf>, bool, Vec<String>), CliError> {
        let mut file = self.config.clone();
        let mut print = self.print_config;
        let mut rest = Vec::new();
        let mut it = self.overrides.iter();
        while let Some(a) = it.next() {
            match a.as_str() {
                "--print-config" => print = true,
                "--config" => {
                    let f = it.next().ok_or_else(|| CliError::Usage("missing value for --config".into()))?;
                    file = Some(PathBuf::from(f));
                }
                _ => match a.strip_prefix("--config=") {
                    Some(f) => file = Some(PathBuf::from(f)),
                    None => rest.push(a.clone()),
                },
            }
        }
        Ok((file, print, rest))
    }
}

const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize)]
struct Manifest<'a> {
    schema: &'static str,
    schema_version: u32,
    tool_version: &'static str,
    git_describe: &'static str,
    command: &'a str,
    seed: u64,
    config: Value,
    threads: usize,
    started_unix: f64,
    wall_clock_seconds: f64,
    outputs: Vec<&'a str>,
    passed: bool,
    failures: &'a [String],
    summary: &'a serde_json::Map<String, Value>,
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("NCROUGH_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("NCROUGH_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

fn write_outputs(dir: &Path, manifest: &Manifest, artifacts: &Artifacts) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Usage(format!("cannot write to {}: {e}", dir.display()));
    std::fs::create_dir_all(dir).map_err(io)?;
    for (name, bytes) in &artifacts.files {
        std::fs::write(dir.join(name), bytes).map_err(io)?;
    }
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    text.push('\n');
    std::fs::write(dir.join("manifest.json"), text).map_err(io)
}

/// Resolves the configuration, computes, and writes outputs plus manifest.
fn execute<P>(
    command: &str,
    args: &RunArgs,
    validate: impl Fn(&P) -> Result<(), CliError>,
    run: impl Fn(&P, u64) -> Result<Artifacts, CliError>,
) -> Result<(), CliError>
where
    P: Serialize + serde::de::DeserializeOwned + Default,
{
    let (file, print_config, overrides) = args.split()?;
    let cfg: RunConfig<P> = RunConfig::load(command, file.as_deref(), &overrides)?;
    validate(&cfg.params)?;
    if print_config {
        println!("{}", serde_json::to_string_pretty(&cfg.to_value()).expect("config serializes"));
        return Ok(());
    }
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
    let clock = Instant::now();
    let artifacts = run(&cfg.params, cfg.seed)?;
    let manifest = Manifest {
        schema: "ncrough-manifest",
        schema_version: MANIFEST_SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION"),
        git_describe: env!("NCROUGH_GIT_DESCRIBE"),
        command,
        seed: cfg.seed,
        config: cfg.to_value(),
        threads: rayon::current_num_threads(),
        started_unix: started,
        wall_clock_seconds: clock.elapsed().as_secs_f64(),
        outputs: artifacts.files.iter().map(|(n, _)| n.as_str()).collect(),
        passed: artifacts.failures.is_empty(),
        failures: &artifacts.failures,
        summary: &artifacts.summary,
    };
    write_outputs(&cfg.output, &manifest, &artifacts)?;
    println!("{command}: wrote {} files to {}", artifacts.files.len() + 1, cfg.output.display());
    if artifacts.failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(artifacts.failures))
    }
}

fn study<S: Study>(name: StudyName, args: &RunArgs) -> Result<(), CliError> {
    execute::<S>(
        &format!("study {}", name.as_str()),
        args,
        |p| Ok(p.check()?),
        commands::run_study,
    )
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Moments { q, order, output } => {
            let table = commands::moments(q, order)?;
            let csv = table.to_csv()?;
            if let Some(file) = output {
                std::fs::write(&file, &csv)
                    .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", file.display())))?;
            }
            print!("{csv}");
            Ok(())
        }
        Command::Simulate(args) => execute("simulate", &args, SimulateConfig::validate, commands::simulate),
        Command::Integrate(args) => execute("integrate", &args, IntegrateConfig::validate, commands::integrate),
        Command::Solve(args) => execute("solve", &args, SolveConfig::validate, commands::solve),
        Command::Study { name, run } => match name {
            StudyName::AreaConvergence => study::<AreaConvergenceConfig>(name, &run),
            StudyName::SolutionConvergence => study::<SolutionConvergenceConfig>(name, &run),
            StudyName::ItoFormula => study::<ItoFormulaConfig>(name, &run),
            StudyName::ItoStrato => study::<ItoStratoConfig>(name, &run),
            StudyName::Bg => study::<BgConfig>(name, &run),
            StudyName::Nonextension => study::<NonextensionConfig>(name, &run),
            StudyName::Bounds => study::<BoundsConfig>(name, &run),
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprintln!("error: {m}"),
                CliError::Numeric(m) => eprintln!("numeric failure: {m}"),
                CliError::Failed(rows) => {
                    eprintln!("{} check(s) failed:", rows.len());
                    for r in rows {
                        eprintln!("  {r}");
                    }
                }
            }
            ExitCode::from(e.code())
        }
    }
}
