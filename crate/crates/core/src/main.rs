use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mmequity::pipeline::{ModeSelect, Pipeline, PipelineError, Stage};
use mmequity::synth::{generate_scenario, ScenarioSpec, SynthError};

#[derive(Parser)]
#[command(name = "mmequity", version, about = "Spatial-equity analysis of shared micromobility")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Scooter,
    Bike,
    Both,
}

impl From<ModeArg> for ModeSelect {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Scooter => ModeSelect::Scooter,
            ModeArg::Bike => ModeSelect::Bike,
            ModeArg::Both => ModeSelect::Both,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    IngestCheck,
    InferTrips,
    Metrics,
    Report,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::IngestCheck => Stage::IngestCheck,
            StageArg::InferTrips => Stage::InferTrips,
            StageArg::Metrics => Stage::Metrics,
            StageArg::Report => Stage::Report,
        }
    }
}

#[derive(Args)]
struct StageArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config file and MMEQUITY_OUT_DIR.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "both")]
    mode: ModeArg,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic city in the ingest formats.
    Synth {
        /// Scenario description (TOML); defaults to the built-in desk scenario.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "both")]
        mode: ModeArg,
    },
    /// Parse and validate every input; write counts and warnings.
    IngestCheck(StageArgs),
    /// Infer scooter trips and events, convert bikeshare trips, derive idle intervals.
    InferTrips(StageArgs),
    /// Per-zone availability, accessibility, usage and idle time, plus KDE rasters.
    Metrics(StageArgs),
    /// Category, population-weighted and Welch tables from the zone metrics.
    Report(StageArgs),
    /// Run all stages in order, or up to `--stage`.
    Run {
        #[command(flatten)]
        args: StageArgs,
        /// Last stage to run.
        #[arg(long, value_enum)]
        stage: Option<StageArg>,
    },
}

fn pipeline(args: &StageArgs) -> Result<Pipeline, PipelineError> {
    Pipeline::from_config_file(&args.config, args.out.clone(), args.mode.into())
}

fn run_stage(args: &StageArgs, stage: Stage) -> Result<(), PipelineError> {
    let p = pipeline(args)?;
    let started = std::time::Instant::now();
    let m = p.run_stage(stage)?;
    eprintln!("{stage}: {:.2}s", started.elapsed().as_secs_f64());
    println!("{stage}: wrote {} files to {}", m.outputs.files.len(), p.out_dir().join(stage.dir()).display());
    Ok(())
}

fn synth(config: Option<&Path>, out: &Path, seed: Option<u64>, mode: ModeArg) -> Result<(), (i32, String)> {
    let mut spec = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| (2, format!("cannot read {}: {e}", p.display())))?;
            toml::from_str::<ScenarioSpec>(&text).map_err(|e| (2, format!("{}: {e}", p.display())))?
        }
        None => ScenarioSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    match mode {
        ModeArg::Scooter => spec.bike = None,
        ModeArg::Bike => spec.scooter_operators.clear(),
        ModeArg::Both => {}
    }
    let code = |e: SynthError| match e {
        SynthError::Io { .. } | SynthError::OverlappingTrips { .. } => (4, e.to_string()),
        _ => (2, e.to_string()),
    };
    let scenario = generate_scenario(&spec).map_err(code)?;
    let m = scenario.write(out).map_err(code)?;
    println!("synth: seed {} wrote {} files to {}", spec.seed, m.manifest.files.len() + 1, out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("error")).init();
    let cli = Cli::parse();
    let result: Result<(), (i32, String)> = match &cli.command {
        Command::Synth { config, out, seed, mode } => synth(config.as_deref(), out, *seed, *mode),
        other => {
            let r = match other {
                Command::IngestCheck(a) => run_stage(a, Stage::IngestCheck),
                Command::InferTrips(a) => run_stage(a, Stage::InferTrips),
                Command::Metrics(a) => run_stage(a, Stage::Metrics),
                Command::Report(a) => run_stage(a, Stage::Report),
                Command::Run { args, stage } => pipeline(args).and_then(|p| {
                    let report = p.run_through(stage.map(Stage::from).unwrap_or(Stage::Report))?;
                    for t in &report.timings {
                        eprintln!("{}: {:.2}s", t.stage, t.seconds);
                    }
                    println!("run: modes {:?}, outputs in {}", report.modes, report.out_dir.display());
                    Ok(())
                }),
                Command::Synth { .. } => unreachable!(),
            };
            r.map_err(|e| (e.exit_code(), e.to_string()))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, message)) => {
            eprintln!("error: {message}");
            ExitCode::from(code as u8)
        }
    }
}
