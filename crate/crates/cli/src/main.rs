//! Command-line runner for scenarios, friction sweeps, benchmarks and
//! fold ablations.
//!
//! Exit codes: 0 on success, 1 on configuration or usage errors, 2 when a
//! run completed but reported solver stagnation or a non-finite state.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use drape::bench::{
    ablate, friction_sweep, frictionless_acceleration, mu_grid, run_throughput_benchmark, stick_slip_bracket, write_rows_csv, FoldTask,
};
use drape::render::render_benchmark;
use drape::scenario::{builtin, load_scenario, run_scenario, RunOptions, Scenario, BUILTIN_NAMES};
use drape::scene::initialize;
use drape::solver::ContactMetric;
use log::info;
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "drape", version, about = "Batched cloth and soft-body simulation with frictional contact")]
struct Cli {
    /// Size of the worker pool used across environments (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a scenario file or a built-in scenario.
    Run(RunArgs),
    /// Sweep friction coefficients on an incline and report sliding.
    FrictionSweep(SweepArgs),
    /// Time simulation steps or depth renders against the environment count.
    Bench(BenchArgs),
    /// Run a fold scenario over a grid of speed, bending and iterations.
    Ablate(AblateArgs),
    /// List the built-in scenarios.
    List,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MetricArg {
    Full,
    Lite,
}

impl From<MetricArg> for ContactMetric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Full => ContactMetric::FullImplicit,
            MetricArg::Lite => ContactMetric::LiteInertia,
        }
    }
}

#[derive(clap::Args, Debug)]
struct RunArgs {
    /// Scenario JSON file or built-in name (see `list`).
    scenario: String,
    #[arg(long, default_value_t = 1)]
    envs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for meshes, depth images and diagnostics.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
    #[arg(long)]
    export_obj_every: Option<usize>,
    #[arg(long)]
    export_depth_every: Option<usize>,
    /// Scale each environment's material stiffness by a seeded factor in [0.5, 1.5].
    #[arg(long)]
    randomize_materials: bool,
    /// Local-global and linear-solver iterations, e.g. `5,10`.
    #[arg(long, value_parser = parse_iters)]
    iters: Option<(usize, usize)>,
}

#[derive(clap::Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    mu_low: f64,
    #[arg(long)]
    mu_high: f64,
    /// Number of intervals between `mu_low` and `mu_high`.
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    /// Incline angle in degrees.
    #[arg(long, default_value_t = 10.0)]
    incline: f64,
    /// CSV output file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BenchMode {
    Sim,
    Render,
}

#[derive(clap::Args, Debug)]
struct BenchArgs {
    #[arg(long, value_enum, default_value_t = BenchMode::Sim)]
    mode: BenchMode,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32")]
    envs_list: Vec<usize>,
    /// Scenario whose scene is benchmarked.
    #[arg(long, default_value = "towel-fold")]
    scenario: String,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    /// Timed steps per entry (sim) or repeats per entry (render).
    #[arg(long, default_value_t = 10)]
    steps: usize,
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
    /// CSV output file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Towel,
    Tshirt,
}

#[derive(clap::Args, Debug)]
struct AblateArgs {
    #[arg(long, value_enum, default_value_t = TaskArg::Towel)]
    task: TaskArg,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    speed_mult: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.2")]
    bending: Vec<f64>,
    /// Iteration settings separated by `;`: `2` sets both counts, `5,10`
    /// sets local-global and linear-solver iterations.
    #[arg(long, value_delimiter = ';', value_parser = parse_iters, default_value = "5,10")]
    iters: Vec<(usize, usize)>,
    /// CSV output file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_iters(s: &str) -> Result<(usize, usize), String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let num = |p: &str| p.parse::<usize>().map_err(|e| format!("bad iteration count '{p}': {e}"));
    match parts.as_slice() {
        [a] => num(a).map(|a| (a, a)),
        [a, b] => Ok((num(a)?, num(b)?)),
        _ => Err(format!("expected N or LG,LS, got '{s}'")),
    }
}

/// Failure classes mapped to exit codes.
enum Outcome {
    Ok,
    Diagnostics,
}

fn resolve_scenario(name: &str) -> Result<Scenario> {
    let path = Path::new(name);
    if path.exists() {
        return load_scenario(path).with_context(|| format!("loading scenario {}", path.display()));
    }
    match builtin(name) {
        Some(s) => Ok(s),
        None => bail!("'{name}' is neither a scenario file nor a built-in ({})", BUILTIN_NAMES.join(", ")),
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_rows_csv(f, rows).with_context(|| format!("writing {}", path.display()))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<Outcome> {
    let scenario = resolve_scenario(&args.scenario)?;
    let opts = RunOptions {
        n_envs: args.envs,
        seed: args.seed,
        randomize_materials: args.randomize_materials,
        metric: args.metric.map(Into::into),
        iterations: args.iters,
        out: args.out.clone(),
        export_obj_every: args.export_obj_every,
        export_depth_every: args.export_depth_every,
    };
    let out = run_scenario(&scenario, &opts)?;
    println!("scenario {} | {} env(s) | {} steps", scenario.name, out.session.n_envs(), scenario.duration);
    println!("{:>4} {:>12} {:>12} {:>9} {:>12} {:>12}", "env", "residual_m", "penetr_m", "contacts", "kinetic_J", "peak_KE_J");
    for d in out.last() {
        println!(
            "{:>4} {:>12.3e} {:>12.3e} {:>9} {:>12.3e} {:>12.3e}",
            d.env, d.max_constraint_residual, d.max_penetration, d.contacts, d.kinetic_energy, out.peak_kinetic_energy[d.env]
        );
    }
    if let Some(fold) = &out.fold {
        for (env, m) in fold.iter().enumerate() {
            println!("env {env}: fold overlap {:.4}, tip distance {:.4} m", m.overlap, m.tip_distance);
        }
    }
    if let Some(dir) = &args.out {
        println!("exports written to {}", dir.display());
    }
    if out.stagnated() || out.non_finite() {
        eprintln!("run completed with solver diagnostics (stagnation: {}, non-finite: {})", out.stagnated(), out.non_finite());
        return Ok(Outcome::Diagnostics);
    }
    Ok(Outcome::Ok)
}

fn cmd_friction_sweep(args: SweepArgs) -> Result<Outcome> {
    if !(args.mu_low >= 0.0 && args.mu_high >= args.mu_low) {
        bail!("need 0 <= mu-low <= mu-high");
    }
    let theta = args.incline.to_radians();
    let rows = friction_sweep(theta, &mu_grid(args.mu_low, args.mu_high, args.count), args.steps)?;
    println!("incline {:.3} deg, tan = {:.5}, {} steps", args.incline, theta.tan(), args.steps);
    println!("{:>10} {:>14} {:>6}", "mu", "displacement_m", "state");
    for r in &rows {
        let state = if r.stick { "stick" } else if r.displacement > drape::bench::SLIP_THRESHOLD { "slip" } else { "creep" };
        println!("{:>10.5} {:>14.4e} {:>6}", r.mu, r.displacement, state);
    }
    match stick_slip_bracket(&rows) {
        Some((lo, hi)) => println!("stick/slip threshold in ({lo:.5}, {hi:.5}]"),
        None => println!("sweep does not bracket the stick/slip threshold"),
    }
    if args.mu_low == 0.0 && theta > 0.0 {
        let a = frictionless_acceleration(theta, 50)?;
        println!("frictionless acceleration {a:.4} m/s^2 (g sin theta = {:.4})", 9.81 * theta.sin());
    }
    if let Some(path) = &args.out {
        write_csv(path, &rows)?;
    }
    Ok(Outcome::Ok)
}

fn cmd_bench(args: BenchArgs) -> Result<Outcome> {
    if args.envs_list.is_empty() || args.envs_list.contains(&0) {
        bail!("--envs-list needs positive environment counts");
    }
    let mut scenario = resolve_scenario(&args.scenario)?;
    if let Some(m) = args.metric {
        scenario.config.constraintsolver.contact_metric = Some(m.into());
    }
    match args.mode {
        BenchMode::Sim => {
            let rows = run_throughput_benchmark(&scenario.config, &args.envs_list, args.warmup, args.steps)?;
            println!("{:>6} {:>12} {:>8}", "envs", "ms/step", "ratio");
            for r in &rows {
                println!("{:>6} {:>12.3} {:>8.2}", r.n_envs, r.ms_per_step, r.ratio);
            }
            if let Some(path) = &args.out {
                write_csv(path, &rows)?;
            }
        }
        BenchMode::Render => {
            let Some(spec) = &scenario.camera else { bail!("scenario '{}' has no camera", scenario.name) };
            let camera = spec.build()?;
            let n_max = *args.envs_list.iter().max().expect("non-empty");
            let session = initialize(scenario.config.clone(), n_max)?;
            let rows = render_benchmark(&session, &camera, &args.envs_list, args.steps)?;
            println!("{:>6} {:>12} {:>12}", "envs", "total_ms", "ms/env");
            for r in &rows {
                println!("{:>6} {:>12.3} {:>12.3}", r.n_envs, r.total_ms, r.per_env_ms);
            }
            if let Some(path) = &args.out {
                write_csv(path, &rows)?;
            }
        }
    }
    Ok(Outcome::Ok)
}

fn cmd_ablate(args: AblateArgs) -> Result<Outcome> {
    let task = match args.task {
        TaskArg::Towel => FoldTask::Towel,
        TaskArg::Tshirt => FoldTask::Tshirt,
    };
    if args.speed_mult.iter().any(|s| !(*s > 0.0)) {
        bail!("speed multipliers must be positive");
    }
    let cells = ablate(task, &args.speed_mult, &args.bending, &args.iters)?;
    println!("overlap: covered fraction of the mirrored target footprint; tip: mean tip-to-target distance (m)");
    println!("{:>6} {:>8} {:>7} {:>8} {:>9} {:>11} {:>11} {:>6}", "speed", "bending", "iters", "overlap", "tip_m", "peak_KE_J", "penetr_m", "finite");
    let mut unstable = false;
    for c in &cells {
        println!(
            "{:>6} {:>8} {:>7} {:>8.4} {:>9.4} {:>11.3e} {:>11.3e} {:>6}",
            c.speed,
            c.bending,
            format!("{},{}", c.local_global_iterations, c.linear_solver_iterations),
            c.overlap,
            c.tip_distance,
            c.peak_kinetic_energy,
            c.max_penetration,
            c.finite
        );
        unstable |= !c.finite;
    }
    if let Some(path) = &args.out {
        write_csv(path, &cells)?;
    }
    Ok(if unstable { Outcome::Diagnostics } else { Outcome::Ok })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size the worker pool: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::FrictionSweep(a) => cmd_friction_sweep(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::List => {
            for name in BUILTIN_NAMES {
                println!("{name}");
            }
            Ok(Outcome::Ok)
        }
    };
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Diagnostics) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
