use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use clap::{Args, Parser, Subcommand};
use hydroguard::arith::InstrClass;
use hydroguard::campaign::report::{write_trials_csv, TOOL_VERSION};
use hydroguard::campaign::trial::load_golden;
use hydroguard::campaign::{
    aggregate, golden_run, measure_overhead, read_replay_entries, replay, run_campaign, run_trial, threads_from_env,
    write_report, write_trials_jsonl, App, CampaignConfig, CampaignError, CampaignPlan, CampaignReport, InProcess,
    InvalidTrial, RecoveryMode, ReportFormat, TrialExecutor, TrialRecord, TRIALS_FILE,
};
use hydroguard::inject::{CmpMode, FaultSpec};
use hydroguard::resilience::GuardConfig;
use hydroguard::solver::FieldDump;

const EXIT_MISMATCH: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(
    name = "campaign",
    version,
    about = "Fault-injection campaigns on a guarded Euler solver"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Golden run, profile, sampled trials and report.
    Run(RunArgs),
    /// Write the fault-free final state and invariant log.
    Golden(GoldenArgs),
    /// Median guarded/unguarded wall-time ratio minus one.
    Overhead(OverheadArgs),
    /// Re-run recorded trials and compare their records.
    Replay(ReplayArgs),
    /// One trial in a child process; used by `run --isolate`.
    #[command(hide = true)]
    Trial(TrialArgs),
}

#[derive(Args, Clone)]
struct SolverArgs {
    #[arg(long, default_value = "sod")]
    app: App,
    #[arg(long, default_value_t = 200)]
    cells: usize,
    #[arg(long, default_value_t = 200)]
    steps: u64,
    #[arg(long, default_value_t = hydroguard::solver::DEFAULT_CFL)]
    cfl: f64,
    #[arg(long, default_value_t = hydroguard::solver::DEFAULT_GAMMA)]
    gamma: f64,
}

#[derive(Args, Clone)]
struct GuardArgs {
    /// JSON guard configuration; the flags below override its fields.
    #[arg(long, value_name = "FILE")]
    guard_config: Option<PathBuf>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    retry_limit: Option<u32>,
    #[arg(long, default_value_t = hydroguard::campaign::config::DEFAULT_BENIGN_THRESHOLD)]
    benign_threshold: f64,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    guard: GuardArgs,
    #[arg(long)]
    class: InstrClass,
    #[arg(long, default_value_t = 500)]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "twin")]
    recovery: RecoveryMode,
    /// Role of the targeted `cmp`.
    #[arg(long, default_value = "data")]
    mode: CmpMode,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "json")]
    format: ReportFormat,
    /// Run every trial in its own process.
    #[arg(long)]
    isolate: bool,
    /// Also measure fault-free overhead with this many repeats.
    #[arg(long, value_name = "N")]
    overhead_repeats: Option<usize>,
}

#[derive(Args)]
struct GoldenArgs {
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OverheadArgs {
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    guard: GuardArgs,
    #[arg(long, default_value_t = 9)]
    repeats: usize,
}

#[derive(Args)]
struct ReplayArgs {
    /// Trials file (JSON lines) or a single JSON entry.
    #[arg(long, value_name = "FILE")]
    record: PathBuf,
    /// Replay only this zero-based entry.
    #[arg(long)]
    index: Option<usize>,
}

#[derive(Args)]
struct TrialArgs {
    #[arg(long)]
    config: String,
    #[arg(long)]
    spec: String,
    #[arg(long)]
    recovery: bool,
    #[arg(long)]
    golden: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Campaign(CampaignError),
    Mismatch(usize),
}

impl From<CampaignError> for Failure {
    fn from(e: CampaignError) -> Self {
        Failure::Campaign(e)
    }
}

fn campaign_config(solver: &SolverArgs, guard: &GuardArgs) -> Result<CampaignConfig, CampaignError> {
    let mut g = match &guard.guard_config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CampaignError::io(path, e))?;
            serde_json::from_str::<GuardConfig>(&text)
                .map_err(|e| CampaignError::Config(format!("{}: {e}", path.display())))?
        }
        None => GuardConfig::default(),
    };
    if let Some(t) = guard.tolerance {
        g.tolerance = t;
    }
    if let Some(r) = guard.retry_limit {
        g.retry_limit = r;
    }
    let mut cfg = CampaignConfig {
        guard: g,
        benign_threshold: guard.benign_threshold,
        ..Default::default()
    };
    cfg.run.app = solver.app;
    cfg.run.cells = solver.cells;
    cfg.run.steps = solver.steps;
    cfg.run.cfl = solver.cfl;
    cfg.run.gamma = solver.gamma;
    cfg.validate()?;
    Ok(cfg)
}

/// Runs each trial through `campaign trial` in a fresh process.
struct Isolated {
    exe: PathBuf,
    golden_dir: PathBuf,
}

impl TrialExecutor for Isolated {
    fn execute(
        &self,
        cfg: &CampaignConfig,
        _golden: &FieldDump,
        spec: FaultSpec,
        recovery_enabled: bool,
    ) -> Result<TrialRecord, InvalidTrial> {
        let invalid = |reason: String| InvalidTrial {
            seed: spec.seed,
            fault_spec: spec,
            recovery_enabled,
            reason,
        };
        let output = Command::new(&self.exe)
            .arg("trial")
            .arg("--config")
            .arg(serde_json::to_string(cfg).expect("config serializes"))
            .arg("--spec")
            .arg(serde_json::to_string(&spec).expect("spec serializes"))
            .args(recovery_enabled.then_some("--recovery"))
            .arg("--golden")
            .arg(&self.golden_dir)
            .output()
            .map_err(|e| invalid(format!("spawn failed: {e}")))?;
        if !output.status.success() {
            return Err(invalid(format!(
                "child exited with {}: {}",
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        serde_json::from_slice(&output.stdout).map_err(|e| invalid(format!("bad child output: {e}")))
    }
}

fn print_summary(report: &CampaignReport) {
    for g in &report.groups {
        let mode = g.mode.map(|m| format!(" ({})", m.as_str())).unwrap_or_default();
        let recovery = if g.recovery_enabled { "on" } else { "off" };
        println!("{}{mode} recovery {recovery}: {} trials", g.class, g.trials);
        for (outcome, &n) in &g.histogram {
            if n > 0 {
                println!(
                    "  {:<18} {n}/{} ({:.1}%)",
                    outcome.as_str(),
                    g.trials,
                    100.0 * g.rate(*outcome)
                );
            }
        }
        println!(
            "  failure rate {:.1}%, benign fired {} / not fired {}",
            100.0 * g.failure_rate,
            g.benign_fired,
            g.benign_not_fired
        );
    }
    if !report.excluded.is_empty() {
        println!("excluded {} invalid trials", report.excluded.len());
    }
    if let Some(r) = report.overhead_ratio {
        println!("overhead {:.2}%", 100.0 * r);
    }
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let config = campaign_config(&args.solver, &args.guard)?;
    let plan = CampaignPlan {
        config,
        class: args.class,
        mode: args.mode,
        trials: args.trials,
        seed: args.seed,
        recovery: args.recovery,
    };
    if plan.trials == 0 {
        return Err(CampaignError::Usage("--trials must be positive".into()).into());
    }
    fs::create_dir_all(&args.out).map_err(|e| CampaignError::io(&args.out, e))?;
    let golden = golden_run(&plan.config.run)?;
    golden.write_to(&args.out)?;
    let isolated;
    let executor: &dyn TrialExecutor = if args.isolate {
        isolated = Isolated {
            exe: std::env::current_exe().map_err(|e| CampaignError::io(Path::new("campaign"), e))?,
            golden_dir: args.out.clone(),
        };
        &isolated
    } else {
        &InProcess
    };
    let run = match run_campaign(&plan, executor, threads_from_env()) {
        Err(CampaignError::NoSites(class)) => {
            println!("{class}: N/A (no dynamic sites in {})", plan.config.run.app);
            return Ok(());
        }
        other => other?,
    };
    for bad in &run.excluded {
        log::warn!("excluded trial {:?}: {}", bad.fault_spec, bad.reason);
    }
    let mut report = aggregate(&run.records, &run.excluded, Some(&plan))?;
    if let Some(repeats) = args.overhead_repeats {
        report.overhead_ratio = Some(measure_overhead(&plan.config, repeats)?.ratio);
    }
    let name = match args.format {
        ReportFormat::Json => "report.json",
        ReportFormat::Csv => "report.csv",
    };
    write_report(&report, &args.out.join(name), args.format)?;
    write_trials_jsonl(&args.out.join(TRIALS_FILE), &plan.config, &run.records)?;
    write_trials_csv(&run.records, &args.out.join("trials.csv"))?;
    print_summary(&report);
    Ok(())
}

fn cmd_golden(args: GoldenArgs) -> Result<(), Failure> {
    let guard = GuardArgs {
        guard_config: None,
        tolerance: None,
        retry_limit: None,
        benign_threshold: hydroguard::campaign::config::DEFAULT_BENIGN_THRESHOLD,
    };
    let cfg = campaign_config(&args.solver, &guard)?;
    let golden = golden_run(&cfg.run)?;
    golden.write_to(&args.out)?;
    let s = &golden.sites;
    println!(
        "golden {} {} cells {} steps t={:e}: fadd {} fmul {} cmp {} imul {} xor {}",
        cfg.run.app, cfg.run.cells, cfg.run.steps, golden.state.time, s.fadd, s.fmul, s.cmp, s.imul, s.xor
    );
    Ok(())
}

fn cmd_overhead(args: OverheadArgs) -> Result<(), Failure> {
    let cfg = campaign_config(&args.solver, &args.guard)?;
    let m = measure_overhead(&cfg, args.repeats)?;
    println!("{}", serde_json::to_string_pretty(&m).expect("measurement serializes"));
    println!("overhead {:.2}%", 100.0 * m.ratio);
    Ok(())
}

fn cmd_replay(args: ReplayArgs) -> Result<(), Failure> {
    let entries = read_replay_entries(&args.record)?;
    let selected: Vec<(usize, _)> = match args.index {
        Some(i) => {
            let e = entries
                .get(i)
                .ok_or_else(|| CampaignError::Usage(format!("index {i} out of range: {} entries", entries.len())))?;
            vec![(i, e)]
        }
        None => entries.iter().enumerate().collect(),
    };
    let mut mismatches = 0;
    for (i, entry) in selected {
        let outcome = replay(entry)?;
        if outcome.matches {
            println!("entry {i}: match ({})", outcome.replayed.outcome);
        } else {
            mismatches += 1;
            println!("entry {i}: MISMATCH");
            eprintln!(
                "recorded {}\nreplayed {}",
                serde_json::to_string(&outcome.recorded).expect("record serializes"),
                serde_json::to_string(&outcome.replayed).expect("record serializes")
            );
        }
    }
    if mismatches > 0 {
        return Err(Failure::Mismatch(mismatches));
    }
    Ok(())
}

fn cmd_trial(args: TrialArgs) -> Result<(), Failure> {
    let cfg: CampaignConfig =
        serde_json::from_str(&args.config).map_err(|e| CampaignError::Usage(format!("--config: {e}")))?;
    let spec: FaultSpec = serde_json::from_str(&args.spec).map_err(|e| CampaignError::Usage(format!("--spec: {e}")))?;
    let golden = load_golden(&args.golden)?;
    let record = run_trial(&cfg, &golden, spec, args.recovery)?;
    println!("{}", serde_json::to_string(&record).expect("record serializes"));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    log::debug!("{TOOL_VERSION}");
    let result = match cli.command {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Golden(a) => cmd_golden(a),
        Cmd::Overhead(a) => cmd_overhead(a),
        Cmd::Replay(a) => cmd_replay(a),
        Cmd::Trial(a) => cmd_trial(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Mismatch(n)) => {
            eprintln!("error: {n} replayed trials differ from their records");
            ExitCode::from(EXIT_MISMATCH)
        }
        Err(Failure::Campaign(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CampaignError::Io { .. } => EXIT_IO,
                _ => EXIT_USAGE,
            })
        }
    }
}
