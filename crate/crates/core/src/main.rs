use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};

use contact_flow::guidance::{GuidanceConfig, Schedule};
use contact_flow::harness::{
    evaluate_dirs, format_summary_table, generate, replay, sweep, workers_from_env, write_metrics_csv,
    write_summary_csv, GenerateRequest, HarnessError, SweepGrid, WORKERS_ENV,
};
use contact_flow::scenario::{standard_suite, ScenarioSpec};
use contact_flow::Error;

/// Contact-guided flow-matching shape generation.
#[derive(Debug, Parser)]
#[command(name = "contact-flow", version)]
#[command(after_help = "Exit codes: 0 success, 2 generation aborted, 3 evaluation failed, 4 configuration error.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate one run directory.
    Generate(GenerateArgs),
    /// Aggregate run directories into a metrics CSV and a summary table.
    Evaluate(EvaluateArgs),
    /// Run a parameter grid across seeds, in parallel.
    #[command(after_help = format!("Worker threads come from {WORKERS_ENV} (default: all cores)."))]
    Sweep(SweepArgs),
    /// Re-run a manifest and compare every metric and artifact digest.
    Replay(ReplayArgs),
    /// Write the standard scenario suite as TOML files.
    Suite {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct GuidanceArgs {
    /// Early, middle and late stage weights.
    #[arg(long, num_args = 3, value_names = ["EARLY", "MIDDLE", "LATE"], allow_negative_numbers = true)]
    lambda: Option<Vec<f64>>,
    /// Guided updates per timestep.
    #[arg(long)]
    recurrence: Option<usize>,
    #[arg(long, value_parser = parse_schedule)]
    schedule: Option<Schedule>,
    /// Drag neighborhood half-width in voxels.
    #[arg(long)]
    radius: Option<usize>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Defaults to the scenario's first run seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Disable guidance.
    #[arg(long, conflicts_with_all = ["lambda", "recurrence", "schedule"])]
    unguided: bool,
    #[command(flatten)]
    guidance: GuidanceArgs,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Run directories, or directories containing them.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Where to write metrics.csv and summary.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Stage weights; repeat for more cells.
    #[arg(long, num_args = 3, value_names = ["EARLY", "MIDDLE", "LATE"], action = ArgAction::Append, allow_negative_numbers = true)]
    lambda: Vec<f64>,
    #[arg(long, action = ArgAction::Append)]
    recurrence: Vec<usize>,
    #[arg(long, value_parser = parse_schedule, action = ArgAction::Append)]
    schedule: Vec<Schedule>,
    #[arg(long, action = ArgAction::Append)]
    radius: Vec<usize>,
    /// Seeds to run; defaults to the scenario's run seeds.
    #[arg(long, action = ArgAction::Append)]
    seed: Vec<u64>,
    /// Keep only the first N seeds.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_schedule(s: &str) -> Result<Schedule, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_scenario(path: &Path) -> Result<ScenarioSpec, HarnessError> {
    ScenarioSpec::load(path).map_err(HarnessError::Config)
}

fn apply(mut cfg: GuidanceConfig, args: &GuidanceArgs) -> GuidanceConfig {
    if let Some(l) = &args.lambda {
        cfg.stage_lambdas = [l[0], l[1], l[2]];
    }
    if let Some(m) = args.recurrence {
        cfg.recurrence = m;
    }
    if let Some(s) = args.schedule {
        cfg.schedule = s;
    }
    if let Some(r) = args.radius {
        cfg.radius = r;
    }
    cfg
}

fn cmd_generate(args: GenerateArgs) -> Result<(), HarnessError> {
    let spec = load_scenario(&args.scenario)?;
    let mut guidance = apply(spec.guidance.clone(), &args.guidance);
    if args.unguided {
        guidance = guidance.unguided();
    }
    let seed =
        match args.seed {
            Some(s) => s,
            None => *spec.seeds.runs.first().ok_or_else(|| {
                HarnessError::Config(Error::Scenario("scenario lists no run seeds; pass --seed".into()))
            })?,
        };
    let manifest = generate(&GenerateRequest { spec, guidance, seed }, &args.out)?;
    let m = &manifest.metrics;
    println!(
        "{} seed {} ({}): chamfer {:.5}  F@0.01 {:.4}  F@0.02 {:.4}  F@0.05 {:.4}  contact residual {:.5}",
        m.scenario,
        m.seed,
        m.method.label(),
        m.chamfer,
        m.f_001,
        m.f_002,
        m.f_005,
        m.contact_residual_median
    );
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), HarnessError> {
    let eval = evaluate_dirs(&args.runs)?;
    for (dir, why) in &eval.skipped {
        eprintln!("skipped {}: {why}", dir.display());
    }
    print!("{}", format_summary_table(&eval.summary));
    if let Some(out) = args.out {
        std::fs::create_dir_all(&out)?;
        write_metrics_csv(&eval.rows, &out.join("metrics.csv"))?;
        write_summary_csv(&eval.summary, &out.join("summary.csv"))?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), HarnessError> {
    let spec = load_scenario(&args.scenario)?;
    let grid = SweepGrid {
        lambdas: args.lambda.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
        recurrences: args.recurrence,
        schedules: args.schedule,
        radii: args.radius,
    };
    let mut seeds = if args.seed.is_empty() { spec.seeds.runs.clone() } else { args.seed };
    if let Some(n) = args.limit {
        seeds.truncate(n);
    }
    let workers = workers_from_env()?;
    let report = sweep(&spec, &grid, &seeds, workers)?;
    report.write(&args.out)?;
    print!("{}", report.format_table());
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_replay(args: ReplayArgs) -> Result<(), HarnessError> {
    let report = replay(&args.manifest, &args.out)?;
    if report.differences.is_empty() {
        println!("replay matches {} ({} artifacts)", args.manifest.display(), report.original.files.len());
        Ok(())
    } else {
        for d in &report.differences {
            eprintln!("difference: {d}");
        }
        Err(HarnessError::Evaluation(format!("{} differences", report.differences.len())))
    }
}

fn cmd_suite(out: PathBuf) -> Result<(), HarnessError> {
    std::fs::create_dir_all(&out)?;
    for spec in standard_suite() {
        let path = out.join(format!("{}.toml", spec.name));
        std::fs::write(&path, spec.to_toml()?)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(4) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Replay(a) => cmd_replay(a),
        Command::Suite { out } => cmd_suite(out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
