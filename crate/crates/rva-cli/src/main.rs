//! `rva`: deterministic robotic venipuncture simulator.
//!
//! Exit codes: 0 success, 1 configuration/usage error, 2 runtime abort.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rva_core::config::{parse_config, ConfigError, RunConfig};
use rva_core::phantom::ScenarioRegistry;
use rva_core::procedure::{run_attempt, short_axis_pose, Outcome};
use rva_core::rng::{stream, Stream};
use rva_core::trials::{read_log, render_report, run_batch, write_log};
use rva_core::ultrasound::{quality_score, render_frame};

#[derive(Parser)]
#[command(name = "rva", version, about = "Ultrasound-guided robotic venipuncture simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// JSON config path; falls back to $RVA_CONFIG, then built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte Carlo batch: trial log, summary, and report.
    Run {
        #[command(flatten)]
        config: ConfigArg,
        /// Scenario name (see `--list-scenarios`).
        #[arg(long)]
        scenario: Option<String>,
        /// Number of trials.
        #[arg(long)]
        n: Option<u64>,
        /// Base seed; trial i uses base_seed + i.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for frames, trial log, and report.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = false)]
        list_scenarios: bool,
    },
    /// Render a single short-axis frame to a PGM file.
    Render {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Execute one verbose attempt, phase trace to stdout.
    Attempt {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-generate the report from an existing trial log.
    Report {
        /// Trial log (line-delimited JSON).
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum CliError {
    /// Bad configuration or usage: exit 1.
    Usage(String),
    /// Failure while executing: exit 2.
    Runtime(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn load_config(arg: &ConfigArg) -> Result<RunConfig, CliError> {
    let path = arg
        .config
        .clone()
        .or_else(|| std::env::var_os("RVA_CONFIG").map(PathBuf::from));
    match path {
        Some(p) => Ok(parse_config(&p)?),
        None => Ok(RunConfig::default()),
    }
}

fn resolve_scenario<'r>(
    registry: &'r ScenarioRegistry,
    cfg: &RunConfig,
    flag: Option<&str>,
) -> Result<&'r dyn rva_core::phantom::Scenario, CliError> {
    let name = flag.unwrap_or(&cfg.trials.scenario);
    registry.get(name).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown scenario `{name}`; available: {}",
            registry.names().join(", ")
        ))
    })
}

fn cmd_run(
    config: &ConfigArg,
    scenario: Option<&str>,
    n: Option<u64>,
    seed: Option<u64>,
    out: Option<&Path>,
    list_scenarios: bool,
) -> Result<(), CliError> {
    let registry = ScenarioRegistry::builtin();
    if list_scenarios {
        for name in registry.names() {
            println!("{name}");
        }
        return Ok(());
    }
    let mut cfg = load_config(config)?;
    if let Some(n) = n {
        cfg.trials.n = n;
    }
    if let Some(seed) = seed {
        cfg.trials.base_seed = seed;
    }
    if let Some(out) = out {
        cfg.trials.out_dir = Some(out.join("frames").to_string_lossy().into_owned());
        cfg.trials.keep_frames = true;
    }
    cfg.validate()?;
    let scenario = resolve_scenario(&registry, &cfg, scenario)?;

    let (records, summary) = run_batch(scenario, cfg.trials.n, cfg.trials.base_seed, &cfg)
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    if let Some(out) = out {
        std::fs::create_dir_all(out).map_err(|e| CliError::Runtime(e.to_string()))?;
        write_log(&records, &out.join("trials.jsonl"))
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        render_report(&records, out).map_err(|e| CliError::Runtime(e.to_string()))?;
    }

    println!(
        "scenario={} n={} base_seed={}",
        scenario.name(),
        summary.n_trials,
        cfg.trials.base_seed
    );
    println!(
        "first_attempt_rate={:.3} overall_rate={:.3}",
        summary.first_attempt_rate, summary.overall_rate
    );
    match (
        summary.mean_success_diameter_mm,
        summary.min_success_diameter_mm,
    ) {
        (Some(mean), Some(min)) => {
            println!("mean_success_diameter_mm={mean:.3} min_success_diameter_mm={min:.3}")
        }
        _ => println!("no successful trials"),
    }
    Ok(())
}

fn cmd_render(
    config: &ConfigArg,
    scenario: Option<&str>,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    cfg.validate()?;
    let registry = ScenarioRegistry::builtin();
    let scenario = resolve_scenario(&registry, &cfg, scenario)?;
    let block = scenario.generate(seed, &cfg.scenario);
    let vessel = block
        .primary_vessel()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let mid = vessel.midpoint();
    let pose = short_axis_pose(mid.x, mid.y);
    let mut rng = stream(seed, 0, Stream::Speckle);
    let frame = render_frame(&block, &pose, &cfg.us, &mut rng, None)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let file = std::fs::File::create(out).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut w = std::io::BufWriter::new(file);
    frame
        .write_pgm(&mut w)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    println!(
        "wrote {} ({}x{} px, {:.3} mm/px, Q={:.3})",
        out.display(),
        frame.width,
        frame.height,
        frame.mm_per_px,
        quality_score(&frame)
    );
    Ok(())
}

fn cmd_attempt(config: &ConfigArg, scenario: Option<&str>, seed: u64) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    cfg.validate()?;
    let registry = ScenarioRegistry::builtin();
    let scenario = resolve_scenario(&registry, &cfg, scenario)?;
    let out = run_attempt(scenario, seed, &cfg);

    println!("scenario={} seed={}", scenario.name(), seed);
    println!(
        "vessel: diameter={:.3} mm, near-wall depth={:.3} mm",
        out.vessel_diameter_mm, out.vessel_depth_mm
    );
    println!(
        "calibration: distance={:.5} mm-eq, passed={}",
        out.calibration.distance, out.calibration.passed
    );
    println!("image quality Q={:.3}", out.quality_q);
    println!("alignment distance={:.3} mm", out.align_distance_mm);
    println!("phase trace:");
    for (phase, tick) in &out.phase_trace {
        println!("  tick {tick:6}  {phase:?}");
    }
    println!(
        "attempts_used={} max_force={:.3} N blood_return={}",
        out.attempts_used, out.max_force_n, out.blood_return
    );
    if let Some(det) = &out.needle_tip_detection {
        println!(
            "needle tip echo at ({:.2}, {:.2}) mm in image",
            det.center_mm[0], det.center_mm[1]
        );
    }
    println!("outcome: {:?}", out.outcome);
    match out.outcome {
        Outcome::Aborted(_) => Err(CliError::Runtime("attempt aborted".to_string())),
        _ => Ok(()),
    }
}

fn cmd_report(log: &Path, out: &Path) -> Result<(), CliError> {
    let records = read_log(log).map_err(|e| match e {
        rva_core::trials::TrialsError::Io(io) => CliError::Runtime(io.to_string()),
        other => CliError::Usage(other.to_string()),
    })?;
    let written = render_report(&records, out).map_err(|e| CliError::Runtime(e.to_string()))?;
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            config,
            scenario,
            n,
            seed,
            out,
            list_scenarios,
        } => cmd_run(
            config,
            scenario.as_deref(),
            *n,
            *seed,
            out.as_deref(),
            *list_scenarios,
        ),
        Command::Render {
            config,
            scenario,
            seed,
            out,
        } => cmd_render(config, scenario.as_deref(), *seed, out),
        Command::Attempt {
            config,
            scenario,
            seed,
        } => cmd_attempt(config, scenario.as_deref(), *seed),
        Command::Report { log, out } => cmd_report(log, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
    }
}
