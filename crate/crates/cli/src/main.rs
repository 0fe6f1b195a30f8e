//! `noahsim`: single runs, parameter sweeps and the verification battery.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use noah_sim::engine::{fnv1a64, GENERATOR_ID};
use noah_sim::experiments::{self, SweepSpec};
use noah_sim::sim::RunOptions;
use noah_sim::{Scenario, SchedulerSpec};

const EXIT_PARSE: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "noahsim",
    version,
    about = "Discrete-event simulator of serverless event scheduling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Execute one run and print its summary row.
    Run(RunArgs),
    /// Run every (lambda, scheduler, seed) point of a grid.
    Sweep(SweepArgs),
    /// Check the simulator against analytic queueing results.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Scenario file; the built-in evaluation scenario is used when omitted.
    scenario: Option<PathBuf>,
    /// Output directory root (scenario `output.dir`).
    #[arg(long, env = "NOAHSIM_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Scheduler (`scheduler`): ow, noncoop or noah:<alpha>.
    #[arg(long)]
    scheduler: Option<String>,
    /// Peak arrival rate per class (`classes[*].peak_rate`).
    #[arg(long)]
    lambda: Option<f64>,
    /// Seed (`seeds`); the first scenario seed is used when omitted.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the per-event trace (`output.trace`).
    #[arg(long)]
    trace: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Lambda grid: `a:b`, `a:b:step` or a comma-separated list.
    #[arg(long, default_value = "1:80")]
    lambda: String,
    /// Comma-separated scheduler labels.
    #[arg(long, default_value = "ow,noncoop,noah:10ms,noah:1ms,noah:100us,noah:10us")]
    schedulers: String,
    /// Seeds (`seeds`): `a:b` or a comma-separated list.
    #[arg(long)]
    seeds: Option<String>,
    /// Concurrent runs.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Reduced sample counts.
    #[arg(long)]
    quick: bool,
}

/// Error split into the two exit classes.
enum Failure {
    Parse(anyhow::Error),
    Runtime(anyhow::Error),
}

fn parse<T>(r: Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Parse)
}

fn runtime<T>(r: Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Runtime)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Verify(a) => cmd_verify(a),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Parse(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_PARSE)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn load_scenario(common: &Common) -> Result<Scenario> {
    let mut sc = match &common.scenario {
        Some(p) => Scenario::load(p)?,
        None => Scenario::evaluation(10.0, SchedulerSpec::ow()),
    };
    if let Some(out) = &common.out {
        sc.output.dir = Some(out.display().to_string());
    }
    Ok(sc)
}

/// Parses `a:b`, `a:b:step` or `x,y,z`.
fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let num = |s: &str| -> Result<f64> { s.trim().parse::<f64>().with_context(|| format!("invalid number `{s}`")) };
    let parts: Vec<&str> = text.split(':').collect();
    let grid = match parts.as_slice() {
        [single] => single.split(',').map(num).collect::<Result<Vec<_>>>()?,
        [a, b] | [a, b, _] => {
            let (a, b) = (num(a)?, num(b)?);
            let step = if parts.len() == 3 { num(parts[2])? } else { 1.0 };
            if step <= 0.0 || b < a {
                bail!("invalid range `{text}`");
            }
            let n = ((b - a) / step + 1e-9).floor() as usize;
            (0..=n).map(|i| a + step * i as f64).collect()
        }
        _ => bail!("invalid grid `{text}`"),
    };
    if grid.is_empty() {
        bail!("empty grid `{text}`");
    }
    Ok(grid)
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    parse_grid(text)?
        .into_iter()
        .map(|v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as u64)
            } else {
                Err(anyhow!("invalid seed `{v}`"))
            }
        })
        .collect()
}

fn parse_schedulers(text: &str) -> Result<Vec<SchedulerSpec>> {
    text.split(',')
        .map(|s| s.parse::<SchedulerSpec>().map_err(|e| anyhow!(e)))
        .collect()
}

fn output_root(sc: &Scenario) -> PathBuf {
    PathBuf::from(sc.output.dir.clone().unwrap_or_else(|| "results".into()))
}

fn write_metadata(dir: &Path, value: serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(&value)?;
    fs::write(dir.join("metadata.json"), text + "\n").with_context(|| format!("writing metadata in {}", dir.display()))
}

fn cmd_run(args: RunArgs) -> Result<ExitCode, Failure> {
    let mut sc = parse(load_scenario(&args.common))?;
    if let Some(s) = &args.scheduler {
        sc.scheduler = parse(s.parse::<SchedulerSpec>().map_err(|e| anyhow!(e)))?;
    }
    if let Some(l) = args.lambda {
        sc.set_peak_rate(l);
    }
    if let Some(seed) = args.seed {
        sc.seeds = vec![seed];
    }
    if args.trace {
        sc.output.trace = true;
    }
    parse(sc.validate().map_err(anyhow::Error::from))?;
    let seed = sc.seeds[0];
    let opts = RunOptions {
        trace: sc.output.trace,
        check_invariants: false,
    };
    let (row, out) = runtime(experiments::run_once(&sc, seed, opts).map_err(anyhow::Error::from))?;

    let hash = sc.digest();
    let dir = output_root(&sc).join(format!("run-{hash:016x}-seed{seed}"));
    runtime(fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display())))?;
    runtime(fs::write(dir.join("scenario.toml"), sc.to_toml()).context("writing scenario"))?;
    runtime(experiments::write_csv(std::slice::from_ref(&row), &dir.join("summary.csv")).map_err(anyhow::Error::from))?;
    if sc.output.trace {
        runtime(experiments::write_trace(&out, &dir.join("trace.jsonl")).map_err(anyhow::Error::from))?;
    }
    runtime(write_metadata(
        &dir,
        json!({
            "command": "run",
            "seed": seed,
            "scheduler": sc.scheduler.to_string(),
            "scenario_hash": format!("{hash:016x}"),
            "generator": GENERATOR_ID,
            "function_hash": "FNV-1a 64-bit",
            "trace_digest": row.trace_digest,
            "version": env!("CARGO_PKG_VERSION"),
        }),
    ))?;
    print!("{}", row.to_csv());
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(args: SweepArgs) -> Result<ExitCode, Failure> {
    let mut sc = parse(load_scenario(&args.common))?;
    if let Some(s) = &args.seeds {
        sc.seeds = parse(parse_seeds(s))?;
    }
    let lambda_grid = parse(parse_grid(&args.lambda))?;
    let schedulers = parse(parse_schedulers(&args.schedulers))?;
    parse(sc.validate().map_err(anyhow::Error::from))?;
    if args.parallel == 0 {
        return Err(Failure::Parse(anyhow!("--parallel must be at least 1")));
    }
    let spec = SweepSpec {
        lambda_grid,
        schedulers,
        seeds: sc.seeds.clone(),
        base: sc.clone(),
    };

    let hash = sc.digest();
    let grid_key = format!("{:?}|{}|{:?}", spec.lambda_grid, args.schedulers, spec.seeds);
    let grid_hash = fnv1a64(grid_key.as_bytes()) ^ hash;
    let dir = output_root(&sc).join(format!("sweep-{grid_hash:016x}"));
    runtime(fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display())))?;
    runtime(fs::write(dir.join("scenario.toml"), sc.to_toml()).context("writing scenario"))?;
    let partial = dir.join("results.partial.csv");
    let rows = runtime(experiments::run_sweep(&spec, args.parallel, Some(&partial)).map_err(anyhow::Error::from))?;
    runtime(experiments::write_csv(&rows, &dir.join("results.csv")).map_err(anyhow::Error::from))?;
    runtime(
        experiments::write_aggregate(&experiments::aggregate(&rows), &dir.join("aggregate.csv"))
            .map_err(anyhow::Error::from),
    )?;
    let _ = fs::remove_file(&partial);
    let failed = rows.iter().filter(|r| !r.is_ok()).count();
    runtime(write_metadata(
        &dir,
        json!({
            "command": "sweep",
            "seeds": spec.seeds,
            "lambda_grid": spec.lambda_grid,
            "schedulers": spec.schedulers.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
            "scenario_hash": format!("{hash:016x}"),
            "generator": GENERATOR_ID,
            "function_hash": "FNV-1a 64-bit",
            "rows": rows.len(),
            "failed_rows": failed,
            "version": env!("CARGO_PKG_VERSION"),
        }),
    ))?;
    println!("{} rows written to {}", rows.len(), dir.join("results.csv").display());
    if failed > 0 {
        eprintln!("{failed} grid points failed; see the error column");
        return Ok(ExitCode::from(EXIT_RUNTIME));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(args: VerifyArgs) -> Result<ExitCode, Failure> {
    let checks = noah_sim::verify::run_checks(args.quick);
    for c in &checks {
        println!("{}", c.line());
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        println!("{failed} of {} checks failed", checks.len());
        Ok(ExitCode::FAILURE)
    } else {
        println!("all {} checks passed", checks.len());
        Ok(ExitCode::SUCCESS)
    }
}
