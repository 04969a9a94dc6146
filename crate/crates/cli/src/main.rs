//! `borrowsim`: simulate operating characteristics of hybrid control arm
//! designs, calibrate borrowing tuning parameters, and plan accrual.

mod config;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use borrowsim::borrowing::Method;
use borrowsim::planner::{event_curves, plan, project_events, PlannerInputs, PlannerOutputs};
use borrowsim::runner::{calibrate_tuning, run_cells, OCGrid, Preset};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use config::{CalibrationOverrides, ConfigFile, CurveSpec, Overrides};

/// Failure classes, each with its own exit status.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Infeasible(String),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Infeasible(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<borrowsim::Error> for CliError {
    fn from(e: borrowsim::Error) -> Self {
        use borrowsim::Error;
        match e {
            Error::Domain(_) => CliError::Config(e.to_string()),
            Error::InfeasibleDesign(_) | Error::InfeasiblePlan(_) => CliError::Infeasible(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "borrowsim", version, about)]
struct Cli {
    /// Worker threads; results do not depend on this value.
    #[arg(long, global = true, env = "BORROWSIM_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate operating characteristics over a grid of hazard ratios.
    Simulate(RunArgs),
    /// Grid-search one method's tuning parameter.
    Calibrate {
        #[command(flatten)]
        run: RunArgs,
        /// Method to calibrate.
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
        /// Candidate values, `start:stop:step` or a comma-separated list.
        #[arg(long)]
        grid: Option<String>,
        /// Power required at the power scenario.
        #[arg(long)]
        target_power: Option<f64>,
    },
    /// Accrual and event projections for original and hybrid designs.
    Plan {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replicates per scenario.
    #[arg(long)]
    reps: Option<u32>,
    /// Run scale; defaults to the config's preset, else `desk`.
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Desk => Preset::Desk,
            PresetArg::Paper => Preset::Paper,
        }
    }
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|_| {
        let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
        format!("unknown method {s:?}; expected one of {}", names.join(", "))
    })
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            preset: self.preset.map(Preset::from),
            seed: self.seed,
            reps: self.reps,
        }
    }
}

fn thread_pool(threads: Option<usize>) -> Result<(rayon::ThreadPool, usize), CliError> {
    let n = match threads {
        Some(0) => return Err(CliError::Config("--threads must be at least 1".into())),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| CliError::Runtime(format!("cannot start worker pool: {e}")))?;
    Ok((pool, n))
}

fn manifest_base(command: &str, digest: String, threads: usize, started: Instant) -> serde_json::Value {
    json!({
        "tool": "borrowsim",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "schema_version": config::SCHEMA_VERSION,
        "config_digest": digest,
        "threads": threads,
        "duration_seconds": started.elapsed().as_secs_f64(),
    })
}

fn extend(manifest: &mut serde_json::Value, extra: serde_json::Value) {
    if let (Some(m), serde_json::Value::Object(e)) = (manifest.as_object_mut(), extra) {
        m.extend(e);
    }
}

fn simulate(args: &RunArgs, threads: Option<usize>) -> Result<(), CliError> {
    let started = Instant::now();
    let file = ConfigFile::load(args.config.as_deref())?;
    let settings = config::resolve_simulation(&file, &args.overrides())?;
    let digest = config::digest("simulate", &settings);
    let (pool, n_threads) = thread_pool(threads)?;
    let scenario = &settings.scenario;
    eprintln!(
        "simulate: {} cells x {} replicates, methods {}",
        scenario.all_cells().len(),
        scenario.n_replicates,
        scenario.methods.iter().map(|m| m.name()).collect::<Vec<_>>().join(",")
    );

    let cells = pool.install(|| run_cells(scenario, &scenario.all_cells()))?;
    let grid = OCGrid::from_cells(&cells, &scenario.tuning);
    let oc_grid = report::oc_grid_csv(&grid)?;
    let oc_long = report::oc_long_csv(&grid)?;

    let mut manifest = manifest_base("simulate", digest, n_threads, started);
    extend(
        &mut manifest,
        json!({
            "preset": settings.preset,
            "master_seed": scenario.master_seed,
            "outputs": ["oc_grid.csv", "oc_long.csv"],
            "exclusions": {
                "total": grid.total_excluded(),
                "by_scenario": report::scenario_summaries(&cells),
            },
            "audit": report::audit_summary(&cells, scenario.design.target_events),
            "config": settings,
        }),
    );
    report::write_outputs(
        &args.out,
        &[
            ("oc_grid.csv", oc_grid),
            ("oc_long.csv", oc_long),
            ("manifest.json", report::manifest_bytes(&manifest)),
        ],
    )?;
    eprintln!(
        "wrote {} rows to {} in {:.1} s",
        grid.rows.len(),
        args.out.join("oc_grid.csv").display(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

fn calibrate(
    args: &RunArgs,
    calib: CalibrationOverrides,
    threads: Option<usize>,
) -> Result<(), CliError> {
    let started = Instant::now();
    let file = ConfigFile::load(args.config.as_deref())?;
    let settings = config::resolve_calibration(&file, &args.overrides(), &calib)?;
    let digest = config::digest("calibrate", &settings);
    let (pool, n_threads) = thread_pool(threads)?;
    eprintln!(
        "calibrate: {} over {} candidates, {} replicates each",
        settings.spec.method,
        settings.spec.grid.len(),
        settings.simulation.scenario.n_replicates
    );

    let result = pool.install(|| calibrate_tuning(&settings.simulation.scenario, &settings.spec))?;
    let table = report::calibration_csv(&result)?;
    let mut manifest = manifest_base("calibrate", digest, n_threads, started);
    extend(
        &mut manifest,
        json!({
            "preset": settings.simulation.preset,
            "master_seed": settings.simulation.scenario.master_seed,
            "outputs": ["calibration_table.csv"],
            "selected_value": result.selected_value(),
            "feasible": result.feasible,
            "rationale": result.rationale,
            "mc_standard_errors": result
                .candidates
                .iter()
                .map(|c| json!({"value": c.value, "power_mc_se": c.power_mc_se}))
                .collect::<Vec<_>>(),
            "config": settings,
        }),
    );
    report::write_outputs(
        &args.out,
        &[
            ("calibration_table.csv", table),
            ("manifest.json", report::manifest_bytes(&manifest)),
        ],
    )?;
    println!("{}", result.rationale);
    if result.feasible {
        Ok(())
    } else {
        Err(CliError::Infeasible(format!(
            "no candidate reached power {}",
            settings.spec.target_power
        )))
    }
}

fn curve_times(spec: &CurveSpec, plans: &[&PlannerOutputs]) -> Vec<f64> {
    let end = spec.end_months.unwrap_or_else(|| {
        let latest = plans
            .iter()
            .map(|p| p.cutoff_months.unwrap_or(0.0).max(p.enrollment_months))
            .fold(0.0, f64::max);
        1.25 * latest
    });
    let steps = (end / spec.step_months).ceil().max(1.0) as usize;
    (0..=steps).map(|k| k as f64 * spec.step_months).collect()
}

fn plan_command(config_path: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let started = Instant::now();
    let file = ConfigFile::load(config_path)?;
    let settings = config::resolve_plan(&file)?;
    let digest = config::digest("plan", &settings);
    let hybrid_inputs = settings.inputs;
    let original_inputs = hybrid_inputs.without_external();

    let solve = |label: &str, inputs: &PlannerInputs| {
        plan(inputs).map_err(|e| match CliError::from(e) {
            CliError::Infeasible(m) => CliError::Infeasible(format!("{label} plan: {m}")),
            other => other,
        })
    };
    let plans = solve("original", &original_inputs).and_then(|o| Ok((o, solve("hybrid", &hybrid_inputs)?)));
    let (original, hybrid) = match plans {
        Ok(p) => p,
        Err(err) => {
            let mut manifest = manifest_base("plan", digest, 1, started);
            extend(
                &mut manifest,
                json!({"status": "infeasible", "diagnostic": err.message(), "outputs": [], "config": settings}),
            );
            report::write_outputs(out, &[("manifest.json", report::manifest_bytes(&manifest))])?;
            return Err(err);
        }
    };

    let at_cutoff = |p: &PlannerOutputs, i: &PlannerInputs| project_events(p, i, p.cutoff_months.unwrap_or(0.0));
    let table = report::plan_report_csv(
        &original,
        at_cutoff(&original, &original_inputs),
        original_inputs.external_rate,
        &hybrid,
        at_cutoff(&hybrid, &hybrid_inputs),
        hybrid_inputs.external_rate,
    )?;
    let times = curve_times(&settings.curves, &[&original, &hybrid]);
    let hybrid_curve = report::event_curves_csv(&event_curves(&hybrid, &hybrid_inputs, &times))?;
    let original_curve = report::event_curves_csv(&event_curves(&original, &original_inputs, &times))?;

    let mut manifest = manifest_base("plan", digest, 1, started);
    extend(
        &mut manifest,
        json!({
            "status": "ok",
            "outputs": ["plan_report.csv", "event_curves.csv", "event_curves_original.csv"],
            "config": settings,
        }),
    );
    report::write_outputs(
        out,
        &[
            ("plan_report.csv", table),
            ("event_curves.csv", hybrid_curve),
            ("event_curves_original.csv", original_curve),
            ("manifest.json", report::manifest_bytes(&manifest)),
        ],
    )?;
    println!(
        "hybrid: ratio {:.3}, enrollment {:.1} months, cutoff {:.2} months; original: enrollment {:.1} months, cutoff {:.2} months",
        hybrid.final_ratio,
        hybrid.enrollment_months,
        hybrid.cutoff_months.unwrap_or(f64::NAN),
        original.enrollment_months,
        original.cutoff_months.unwrap_or(f64::NAN),
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(args) => simulate(args, cli.threads),
        Command::Calibrate {
            run,
            method,
            grid,
            target_power,
        } => calibrate(
            run,
            CalibrationOverrides {
                method: *method,
                grid: grid.clone(),
                target_power: *target_power,
            },
            cli.threads,
        ),
        Command::Plan { config, out } => plan_command(config.as_deref(), out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = match e {
                CliError::Config(_) => "config error",
                CliError::Infeasible(_) => "infeasible",
                CliError::Runtime(_) => "error",
            };
            eprintln!("borrowsim: {kind}: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
