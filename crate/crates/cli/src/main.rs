mod io;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use hetplan::cloudsim::{grid_probe, profile_workload, CloudSpec, ProbeGrid};
use hetplan::netmodel::{build_dataset, read_probes_csv, train_model, write_probes_csv, BandwidthModel, TrainConfig};
use hetplan::optimizer::{solve, SolveError, SolverConfig, DEFAULT_EXHAUSTIVE_GATE};
use hetplan::runtime::closed_loop::{render_report, run_closed_loop, summarize, EventKind, EventLog, LoopConfig};
use hetplan::runtime::ReplanConfig;
use hetplan::scenario;
use hetplan::seed;
use hetplan::simulator::{Selection, Simulator};
use hetplan::types::{Catalog, ModelProfile, Plan, TrainJob, TrainJobFile};

use crate::io::{read_json, write_atomic, write_json};

const EXIT_UNSAT: u8 = 2;

#[derive(Parser)]
#[command(
    name = "hetplan",
    version,
    about = "Plan and simulate data-parallel training on mixed cloud instances"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep allreduce probes on the synthetic cloud and write a probe CSV.
    Probe(ProbeArgs),
    /// Train the bus bandwidth model from a probe CSV.
    FitNet(FitNetArgs),
    /// Profile per-device compute latency on the synthetic cloud.
    Profile(ProfileArgs),
    /// Choose instance counts and local batches for a job.
    Plan(PlanArgs),
    /// Predict iteration latency of a plan.
    Simulate(SimulateArgs),
    /// Execute a job on the synthetic cloud, replanning on preemption or lag.
    Run(RunArgs),
    /// Render an event log as a timeline and summary table.
    Report(ReportArgs),
    /// Write the reference catalog, cloud spec and job files into a directory.
    Example(ExampleArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long)]
    cloudspec: PathBuf,
    /// ProbeGrid JSON; defaults to 4 B..512 MB by 4x, world sizes 2..64, 3 allocations.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct FitNetArgs {
    #[arg(long)]
    probes: PathBuf,
    /// Per-record age decay rate for sample weights.
    #[arg(long, default_value_t = 0.0)]
    decay_rate: f64,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long)]
    cloudspec: PathBuf,
    #[arg(long, default_value_t = 5)]
    replicates: u32,
    /// Number of batch sizes probed per device.
    #[arg(long, default_value_t = 4)]
    probe_budget: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Planning {
    #[arg(long)]
    job: PathBuf,
    /// Needed when the job names candidate types by id.
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long)]
    profile: PathBuf,
    #[arg(long)]
    net_model: PathBuf,
    #[arg(long, default_value_t = DEFAULT_EXHAUSTIVE_GATE)]
    exhaustive_gate: u64,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    planning: Planning,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SimulateArgs {
    /// Plan JSON, either bare or as written by `plan`.
    #[arg(long)]
    plan: PathBuf,
    #[command(flatten)]
    planning: Planning,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    planning: Planning,
    #[arg(long)]
    cloudspec: PathBuf,
    #[arg(long, default_value_t = 5.0)]
    window_minutes: f64,
    #[arg(long, default_value_t = 150.0)]
    launch_overhead_s: f64,
    #[arg(long, default_value_t = 5.0)]
    detach_overhead_s: f64,
    /// Iterations between throughput checks.
    #[arg(long, default_value_t = 10)]
    check_every: u64,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    log: PathBuf,
    /// Print the summary as JSON instead of text.
    #[arg(long)]
    json: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExampleArgs {
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Probe(a) => cmd_probe(a),
        Command::FitNet(a) => cmd_fit_net(a),
        Command::Profile(a) => cmd_profile(a),
        Command::Plan(a) => cmd_plan(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Run(a) => cmd_run(a),
        Command::Report(a) => cmd_report(a),
        Command::Example(a) => cmd_example(a),
    }
}

/// Writes to `--out` if given, else stdout. A closed stdout is not an error.
fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, bytes),
        None => {
            use std::io::{ErrorKind, Write};
            let mut stdout = std::io::stdout().lock();
            match stdout.write_all(bytes).and_then(|_| stdout.flush()) {
                Err(e) if e.kind() != ErrorKind::BrokenPipe => Err(e.into()),
                _ => Ok(()),
            }
        }
    }
}

fn emit_json<T: serde::Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    match out {
        Some(p) => write_json(p, value),
        None => {
            let mut text = serde_json::to_string_pretty(value)?;
            text.push('\n');
            emit(None, text.as_bytes())
        }
    }
}

fn load_catalog(path: &Path) -> Result<Catalog> {
    let catalog: Catalog = read_json(path)?;
    for t in &catalog.types {
        t.validate()
            .with_context(|| format!("{}: types[{}]", path.display(), t.id))?;
    }
    Ok(catalog)
}

fn load_cloudspec(path: &Path) -> Result<CloudSpec> {
    let spec: CloudSpec = read_json(path)?;
    spec.validate().with_context(|| format!("{}", path.display()))?;
    Ok(spec)
}

fn load_profile(path: &Path) -> Result<ModelProfile> {
    let profile: ModelProfile = read_json(path)?;
    profile.validate().with_context(|| format!("{}", path.display()))?;
    Ok(profile)
}

fn load_job(p: &Planning) -> Result<TrainJob> {
    let file: TrainJobFile = read_json(&p.job)?;
    let catalog = p.catalog.as_deref().map(load_catalog).transpose()?;
    file.resolve(catalog.as_ref())
        .with_context(|| format!("{}: candidate_types", p.job.display()))
}

struct Planner {
    job: TrainJob,
    profile: ModelProfile,
    model: BandwidthModel,
    solver: SolverConfig,
}

impl Planner {
    fn load(p: &Planning) -> Result<Self> {
        let job = load_job(p)?;
        let profile = load_profile(&p.profile)?;
        if job.profile != profile.model_id {
            bail!(
                "{}: profile {:?} does not match model_id {:?} in {}",
                p.job.display(),
                job.profile,
                profile.model_id,
                p.profile.display()
            );
        }
        let model: BandwidthModel = read_json(&p.net_model)?;
        Ok(Self {
            job,
            profile,
            model,
            solver: SolverConfig {
                exhaustive_gate: p.exhaustive_gate,
                force_mode: None,
            },
        })
    }
}

fn cmd_probe(a: ProbeArgs) -> Result<ExitCode> {
    let catalog = load_catalog(&a.catalog)?;
    let spec = load_cloudspec(&a.cloudspec)?;
    let grid = match &a.grid {
        Some(p) => read_json::<ProbeGrid>(p)?,
        None => ProbeGrid::default(),
    };
    let probes = grid_probe(&spec, &catalog.types, &grid, seed::derive(a.common.seed, "probe"))?;
    if probes.is_empty() {
        eprintln!("warning: probe grid is empty, writing an empty dataset");
    }
    let mut csv = Vec::new();
    write_probes_csv(&mut csv, &probes)?;
    emit(a.common.out.as_deref(), &csv)?;
    eprintln!("{} rows", probes.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_fit_net(a: FitNetArgs) -> Result<ExitCode> {
    let file = std::fs::File::open(&a.probes).with_context(|| format!("opening {}", a.probes.display()))?;
    let probes = read_probes_csv(file).with_context(|| format!("{}", a.probes.display()))?;
    let dataset = build_dataset(&probes);
    if dataset.skipped > 0 {
        eprintln!("warning: skipped {} invalid rows", dataset.skipped);
    }
    let config = TrainConfig {
        decay_rate: a.decay_rate,
        seed: seed::derive(a.common.seed, "net-train"),
        ..TrainConfig::default()
    };
    let model = train_model(&dataset.records, &config)?;
    emit_json(a.common.out.as_deref(), &model)?;
    eprintln!(
        "trained on {} rows ({} small, {} large)",
        dataset.records.len(),
        model.training_metadata.rows_small,
        model.training_metadata.rows_large
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_profile(a: ProfileArgs) -> Result<ExitCode> {
    let catalog = load_catalog(&a.catalog)?;
    let spec = load_cloudspec(&a.cloudspec)?;
    let profile = profile_workload(
        &spec,
        &catalog.types,
        a.replicates,
        Some(a.probe_budget),
        seed::derive(a.common.seed, "profile"),
    )?;
    emit_json(a.common.out.as_deref(), &profile)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_plan(a: PlanArgs) -> Result<ExitCode> {
    let p = Planner::load(&a.planning)?;
    let sim = Simulator::new(&p.profile, &p.model, seed::derive(a.common.seed, "sim"));
    let out = a.common.out.as_deref();
    match solve(&p.job, &p.profile, &sim, &p.solver) {
        Ok(s) => {
            eprintln!("{}", s.plan.describe());
            emit_json(out, &json!({ "status": "feasible", "plan": s.plan, "stats": s.stats }))?;
            Ok(ExitCode::SUCCESS)
        }
        Err(SolveError::Unsat {
            reason,
            best_infeasible,
            stats,
        }) => {
            eprintln!("unsat: {reason}");
            emit_json(
                out,
                &json!({ "status": "unsat", "reason": reason, "best_infeasible": best_infeasible, "stats": stats }),
            )?;
            Ok(ExitCode::from(EXIT_UNSAT))
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_simulate(a: SimulateArgs) -> Result<ExitCode> {
    let p = Planner::load(&a.planning)?;
    let value: serde_json::Value = read_json(&a.plan)?;
    let inner = value.get("plan").cloned().unwrap_or(value);
    let plan: Plan = serde_json::from_value(inner).with_context(|| format!("{}: plan", a.plan.display()))?;
    let selection = Selection::from_plan(&plan, &p.job).with_context(|| format!("{}: entries", a.plan.display()))?;
    let sim = Simulator::new(&p.profile, &p.model, seed::derive(a.common.seed, "sim"));
    let result = sim.run(&selection)?;
    emit_json(a.common.out.as_deref(), &result)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_run(a: RunArgs) -> Result<ExitCode> {
    let p = Planner::load(&a.planning)?;
    let spec = load_cloudspec(&a.cloudspec)?;
    let truth = spec.true_profile(&p.job.candidate_types);
    let sim = Simulator::new(&p.profile, &p.model, seed::derive(a.common.seed, "sim"));
    let planner = |j: &TrainJob| solve(j, &p.profile, &sim, &p.solver).map(|s| s.plan);
    let config = LoopConfig {
        replan: ReplanConfig {
            window_minutes: a.window_minutes,
            launch_overhead: a.launch_overhead_s,
            detach_overhead: a.detach_overhead_s,
            ..ReplanConfig::default()
        },
        check_every: a.check_every,
        seed: seed::derive(a.common.seed, "run"),
    };
    let log = run_closed_loop(&p.job, &spec, &truth, planner, &config)?;
    emit(a.common.out.as_deref(), log.to_jsonl().as_bytes())?;
    let s = summarize(&log);
    eprintln!(
        "{} events, {} replans, {} of {} iterations, {:.1} s",
        s.events, s.replans, s.iterations_done, p.job.iterations, s.elapsed
    );
    if log.final_kind() == Some(EventKind::Unsat) {
        return Ok(ExitCode::from(EXIT_UNSAT));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(a: ReportArgs) -> Result<ExitCode> {
    let text = std::fs::read_to_string(&a.log).with_context(|| format!("reading {}", a.log.display()))?;
    let log = EventLog::from_jsonl(&text).with_context(|| format!("{}", a.log.display()))?;
    if a.json {
        emit_json(a.out.as_deref(), &summarize(&log))?;
    } else {
        emit(a.out.as_deref(), render_report(&log).as_bytes())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_example(a: ExampleArgs) -> Result<ExitCode> {
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let catalog = scenario::catalog();
    let job = scenario::preemption_job(&catalog);
    let mut job_file = TrainJobFile::from(&job);
    job_file.candidate_types = job
        .candidate_types
        .iter()
        .map(|t| hetplan::types::TypeRef::Id(t.id.clone()))
        .collect();
    write_json(&a.out.join("catalog.json"), &catalog)?;
    write_json(&a.out.join("cloudspec.json"), &scenario::cloud_spec())?;
    write_json(&a.out.join("cloudspec-preempt.json"), &scenario::preemption_spec())?;
    write_json(&a.out.join("job.json"), &job_file)?;
    eprintln!("wrote catalog.json, cloudspec.json, cloudspec-preempt.json, job.json");
    Ok(ExitCode::SUCCESS)
}
