use std::fmt;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::arith::{Arith, SiteCounts};
use crate::inject::{FaultSpec, InjectionOutcomeTrace};
use crate::resilience::{reference_invariants, GuardConfig, GuardError, GuardVerdict, GuardedRun, RollbackCause};
use crate::solver::{
    compute_invariants, step, AssertionKind, FieldDump, Invariants, Probe, ProbeSample, SolverError, State,
};

use super::config::{CampaignConfig, RunConfig, PROBE_SEED};
use super::CampaignError;

pub const GOLDEN_STATE_FILE: &str = "golden.state";
pub const GOLDEN_LOG_FILE: &str = "golden_invariants.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeClass {
    Benign,
    Sdc,
    Crash,
    AssertionFailure,
    DetectedRecovered,
    Unrecovered,
}

impl OutcomeClass {
    pub const ALL: [OutcomeClass; 6] = [
        OutcomeClass::Benign,
        OutcomeClass::Sdc,
        OutcomeClass::Crash,
        OutcomeClass::AssertionFailure,
        OutcomeClass::DetectedRecovered,
        OutcomeClass::Unrecovered,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OutcomeClass::Benign => "benign",
            OutcomeClass::Sdc => "sdc",
            OutcomeClass::Crash => "crash",
            OutcomeClass::AssertionFailure => "assertion_failure",
            OutcomeClass::DetectedRecovered => "detected_recovered",
            OutcomeClass::Unrecovered => "unrecovered",
        }
    }

    /// Whether the outcome counts toward the failure rate.
    pub fn is_failure(self) -> bool {
        !matches!(self, OutcomeClass::Benign | OutcomeClass::DetectedRecovered)
    }
}

impl fmt::Display for OutcomeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Abnormal end of a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Signal {
    Crash { index: i64, len: usize },
    Assertion { assertion: AssertionKind, cell: usize },
    Exhausted { cause: RollbackCause },
    Integrity,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: u64,
    pub time: f64,
    pub invariants: Invariants,
    pub probe: Option<ProbeSample>,
}

/// How a run ended.
#[derive(Clone, Debug)]
pub struct RunResult {
    /// Final state when the loop ran to completion.
    pub state: Option<State>,
    pub signal: Option<Signal>,
    pub rollbacks: u64,
}

fn iterate(
    ctx: &mut Arith,
    state: &mut State,
    cfl: f64,
    probe: &mut Option<Probe>,
) -> Result<(Invariants, Option<ProbeSample>), SolverError> {
    let (next, _) = step(ctx, state, cfl)?;
    *state = next;
    let sample = probe.as_mut().map(|p| p.sample(ctx, state));
    Ok((compute_invariants(ctx, state), sample))
}

fn solver_signal(e: SolverError) -> Result<Signal, CampaignError> {
    match e {
        SolverError::Crash(v) => Ok(Signal::Crash {
            index: v.index,
            len: v.len,
        }),
        SolverError::Assertion { kind, cell } => Ok(Signal::Assertion { assertion: kind, cell }),
        SolverError::Config(msg) => Err(CampaignError::Config(msg)),
    }
}

/// The main loop, guarded or not. Invariants are computed every iteration in
/// both cases so that the two variants issue identical operation sequences.
pub fn execute(
    cfg: &RunConfig,
    ctx: &mut Arith,
    guard: Option<&GuardConfig>,
    mut log: Option<&mut Vec<LogEntry>>,
) -> Result<RunResult, CampaignError> {
    let initial = cfg.initial_state()?;
    let mut probe = cfg.probe_enabled().then(|| Probe::new(PROBE_SEED));
    let mut record = |state: &State, invariants: Invariants, probe: Option<ProbeSample>| {
        if let Some(log) = log.as_deref_mut() {
            log.push(LogEntry {
                iteration: state.iteration,
                time: state.time,
                invariants,
                probe,
            });
        }
    };

    let Some(guard) = guard else {
        let mut state = initial;
        for k in 0..cfg.steps {
            ctx.begin_iteration(k);
            let r = iterate(ctx, &mut state, cfg.cfl, &mut probe);
            ctx.end_iteration();
            match r {
                Ok((inv, sample)) => record(&state, inv, sample),
                Err(e) => {
                    return Ok(RunResult {
                        state: None,
                        signal: Some(solver_signal(e)?),
                        rollbacks: 0,
                    })
                }
            }
        }
        return Ok(RunResult {
            state: Some(state),
            signal: None,
            rollbacks: 0,
        });
    };

    let reference = reference_invariants(&initial);
    let mut run = GuardedRun::new(initial, reference, *guard).map_err(|e| CampaignError::Config(e.to_string()))?;
    while run.iteration() < cfg.steps {
        ctx.begin_iteration(run.iteration());
        let mut computed = None;
        let verdict = run.guarded_iteration(|s| {
            let (inv, p) = iterate(ctx, s, cfg.cfl, &mut probe)?;
            computed = Some((inv, p));
            Ok(inv)
        });
        ctx.end_iteration();
        let signal = match verdict {
            Ok(GuardVerdict::Committed) => {
                let (inv, sample) = computed.expect("committed iteration computed its totals");
                record(run.current(), inv, sample);
                continue;
            }
            Ok(GuardVerdict::RolledBack) => continue,
            Ok(GuardVerdict::Exhausted) => Signal::Exhausted {
                cause: run.last_cause().expect("exhausted run records its cause"),
            },
            Err(GuardError::Fatal(e)) => solver_signal(e)?,
            Err(GuardError::Integrity { .. }) => Signal::Integrity,
            Err(GuardError::Aborted) => unreachable!("loop stops at the first abort"),
        };
        return Ok(RunResult {
            state: None,
            signal: Some(signal),
            rollbacks: run.total_rollbacks(),
        });
    }
    let rollbacks = run.total_rollbacks();
    Ok(RunResult {
        state: Some(run.into_current()),
        signal: None,
        rollbacks,
    })
}

/// Fault-free reference artifacts.
#[derive(Clone, Debug)]
pub struct Golden {
    pub config: RunConfig,
    pub state: State,
    pub log: Vec<LogEntry>,
    /// Per-class dynamic counts of the run (the profile).
    pub sites: SiteCounts,
}

pub fn golden_run(cfg: &RunConfig) -> Result<Golden, CampaignError> {
    let mut ctx = Arith::new();
    let mut log = Vec::with_capacity(cfg.steps as usize);
    let result = execute(cfg, &mut ctx, None, Some(&mut log))?;
    match (result.state, result.signal) {
        (Some(state), None) => Ok(Golden {
            config: cfg.clone(),
            state,
            log,
            sites: ctx.site_counter_snapshot(),
        }),
        (_, signal) => Err(CampaignError::Config(format!(
            "fault-free run failed ({signal:?}); the setup is unstable"
        ))),
    }
}

/// Dynamic site counts of one fault-free unguarded run.
pub fn profile(cfg: &RunConfig) -> Result<SiteCounts, CampaignError> {
    golden_run(cfg).map(|g| g.sites)
}

impl Golden {
    pub fn fields(&self) -> FieldDump {
        FieldDump::from(&self.state)
    }

    pub fn write_to(&self, dir: &Path) -> Result<(), CampaignError> {
        fs::create_dir_all(dir).map_err(|e| CampaignError::io(dir, e))?;
        let path = dir.join(GOLDEN_STATE_FILE);
        fs::write(&path, self.state.to_dump()).map_err(|e| CampaignError::io(&path, e))?;
        let path = dir.join(GOLDEN_LOG_FILE);
        let mut w = csv::Writer::from_path(&path).map_err(|e| CampaignError::csv(&path, e))?;
        w.write_record([
            "iteration",
            "time",
            "mass",
            "momentum",
            "energy",
            "probe_cell",
            "probe_rho",
        ])
        .map_err(|e| CampaignError::csv(&path, e))?;
        for entry in &self.log {
            let (cell, rho) = match entry.probe {
                Some(p) => (p.cell.to_string(), format!("{:e}", p.rho)),
                None => (String::new(), String::new()),
            };
            let inv = entry.invariants;
            w.write_record([
                entry.iteration.to_string(),
                format!("{:e}", entry.time),
                format!("{:e}", inv.mass),
                format!("{:e}", inv.momentum),
                format!("{:e}", inv.energy),
                cell,
                rho,
            ])
            .map_err(|e| CampaignError::csv(&path, e))?;
        }
        w.flush().map_err(|e| CampaignError::io(&path, e))
    }
}

/// Golden final fields from a run directory.
pub fn load_golden(dir: &Path) -> Result<FieldDump, CampaignError> {
    let path = dir.join(GOLDEN_STATE_FILE);
    let bytes = fs::read(&path)
        .map_err(|e| CampaignError::Usage(format!("missing golden artifacts at {}: {e}", path.display())))?;
    FieldDump::parse(&bytes).map_err(|e| CampaignError::Usage(format!("{}: {e}", path.display())))
}

/// Worst per-field relative L1 deviation `Σ|x - g| / Σ|g|`. A field whose
/// golden norm is zero is scaled by the smallest nonzero golden field norm.
/// Saturates at `f64::MAX`.
pub fn max_rel_error(state: &State, golden: &FieldDump) -> f64 {
    assert_eq!(state.n_cells(), golden.rho.len(), "state and golden differ in size");
    let pairs = [
        (&state.rho, &golden.rho),
        (&state.mom, &golden.mom),
        (&state.ene, &golden.ene),
    ];
    let norms = pairs.map(|(_, g)| g.iter().map(|v| v.abs()).sum::<f64>());
    let floor = norms
        .iter()
        .copied()
        .filter(|&n| n > 0.0)
        .reduce(f64::min)
        .unwrap_or(1e-300);
    let mut worst = 0.0f64;
    for ((x, g), norm) in pairs.iter().zip(norms) {
        let diff: f64 = x.iter().zip(g.iter()).map(|(a, b)| (a - b).abs()).sum();
        let err = diff / norm.max(floor);
        if !(err <= f64::MAX) {
            return f64::MAX;
        }
        worst = worst.max(err);
    }
    worst
}

/// Everything `classify` looks at.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrialEnd {
    pub signal: Option<Signal>,
    pub rollbacks: u64,
    pub max_rel_error: Option<f64>,
}

pub fn classify(end: &TrialEnd, recovery_enabled: bool, benign_threshold: f64) -> OutcomeClass {
    match end.signal {
        Some(Signal::Crash { .. }) => OutcomeClass::Crash,
        Some(Signal::Assertion { .. }) => OutcomeClass::AssertionFailure,
        Some(Signal::Exhausted { .. }) | Some(Signal::Integrity) => OutcomeClass::Unrecovered,
        None => {
            let err = end.max_rel_error.unwrap_or(f64::MAX);
            if recovery_enabled && end.rollbacks > 0 && err == 0.0 {
                OutcomeClass::DetectedRecovered
            } else if err <= benign_threshold {
                OutcomeClass::Benign
            } else {
                OutcomeClass::Sdc
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub seed: Option<u64>,
    pub fault_spec: FaultSpec,
    pub recovery_enabled: bool,
    pub outcome: OutcomeClass,
    pub fired: bool,
    /// `None` when the run ended without a final state.
    pub max_rel_error: Option<f64>,
    pub retries_used: u64,
    pub wall_time: f64,
    pub trace: InjectionOutcomeTrace,
    pub signal: Option<Signal>,
}

impl TrialRecord {
    /// Equality ignoring `wall_time`.
    pub fn same_outcome(&self, other: &TrialRecord) -> bool {
        TrialRecord {
            wall_time: 0.0,
            ..self.clone()
        } == TrialRecord {
            wall_time: 0.0,
            ..other.clone()
        }
    }
}

/// A trial that could not be classified; excluded from aggregation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvalidTrial {
    pub seed: Option<u64>,
    pub fault_spec: FaultSpec,
    pub recovery_enabled: bool,
    pub reason: String,
}

pub fn run_trial(
    cfg: &CampaignConfig,
    golden: &FieldDump,
    spec: FaultSpec,
    recovery_enabled: bool,
) -> Result<TrialRecord, CampaignError> {
    let start = Instant::now();
    let mut ctx = Arith::new();
    ctx.arm(spec).map_err(|e| CampaignError::Config(e.to_string()))?;
    let result = execute(&cfg.run, &mut ctx, recovery_enabled.then_some(&cfg.guard), None)?;
    let trace = ctx.disarm().unwrap_or_default();
    let end = TrialEnd {
        signal: result.signal,
        rollbacks: result.rollbacks,
        max_rel_error: result.state.as_ref().map(|s| max_rel_error(s, golden)),
    };
    Ok(TrialRecord {
        seed: spec.seed,
        fault_spec: spec,
        recovery_enabled,
        outcome: classify(&end, recovery_enabled, cfg.benign_threshold),
        fired: trace.fired,
        max_rel_error: end.max_rel_error,
        retries_used: end.rollbacks,
        wall_time: start.elapsed().as_secs_f64(),
        trace,
        signal: end.signal,
    })
}

/// [`run_trial`] with unexpected panics and errors turned into an
/// [`InvalidTrial`].
pub fn run_trial_checked(
    cfg: &CampaignConfig,
    golden: &FieldDump,
    spec: FaultSpec,
    recovery_enabled: bool,
) -> Result<TrialRecord, InvalidTrial> {
    let invalid = |reason: String| InvalidTrial {
        seed: spec.seed,
        fault_spec: spec,
        recovery_enabled,
        reason,
    };
    match panic::catch_unwind(AssertUnwindSafe(|| run_trial(cfg, golden, spec, recovery_enabled))) {
        Ok(Ok(record)) => Ok(record),
        Ok(Err(e)) => Err(invalid(e.to_string())),
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            log::warn!("trial {:?} panicked: {msg}", spec.seed);
            Err(invalid(format!("panic: {msg}")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arith::InstrClass;
    use crate::inject::{CmpMode, Target};
    use crate::solver::init_sod;

    fn end(signal: Option<Signal>, rollbacks: u64, err: Option<f64>) -> TrialEnd {
        TrialEnd {
            signal,
            rollbacks,
            max_rel_error: err,
        }
    }

    #[test]
    fn classification_table() {
        let t = 1e-10;
        assert_eq!(classify(&end(None, 0, Some(0.0)), false, t), OutcomeClass::Benign);
        assert_eq!(classify(&end(None, 0, Some(0.3)), false, t), OutcomeClass::Sdc);
        assert_eq!(classify(&end(None, 0, Some(1e-11)), false, t), OutcomeClass::Benign);
        let crash = Signal::Crash {
            index: 1 << 20,
            len: 200,
        };
        assert_eq!(classify(&end(Some(crash), 0, None), true, t), OutcomeClass::Crash);
        let assertion = Signal::Assertion {
            assertion: AssertionKind::NonPositivePressure,
            cell: 3,
        };
        assert_eq!(
            classify(&end(Some(assertion), 0, None), false, t),
            OutcomeClass::AssertionFailure
        );
        let exhausted = Signal::Exhausted {
            cause: RollbackCause::Assertion,
        };
        assert_eq!(
            classify(&end(Some(exhausted), 3, None), true, t),
            OutcomeClass::Unrecovered
        );
        assert_eq!(
            classify(&end(Some(Signal::Integrity), 1, None), true, t),
            OutcomeClass::Unrecovered
        );
        assert_eq!(
            classify(&end(None, 1, Some(0.0)), true, t),
            OutcomeClass::DetectedRecovered
        );
        assert_eq!(classify(&end(None, 1, Some(0.5)), true, t), OutcomeClass::Sdc);
        assert_eq!(classify(&end(None, 0, Some(0.0)), true, t), OutcomeClass::Benign);
    }

    #[test]
    fn relative_error() {
        let s = init_sod(10, 1.4).unwrap();
        let g = FieldDump::from(&s);
        assert_eq!(max_rel_error(&s, &g), 0.0);
        let mut t = s.clone();
        t.rho[0] += 0.5625;
        // Golden density norm is 10 * 0.5625.
        assert!((max_rel_error(&t, &g) - 0.1).abs() < 1e-15);
        let mut t = s.clone();
        t.mom[4] = 0.01;
        let floor = g.rho.iter().sum::<f64>();
        assert!((max_rel_error(&t, &g) - 0.01 / floor).abs() < 1e-18);
        t.ene[1] = 1e308;
        t.ene[2] = 1e308;
        assert_eq!(max_rel_error(&t, &g), f64::MAX);
    }

    fn small() -> CampaignConfig {
        let mut c = CampaignConfig::default();
        c.run.cells = 40;
        c.run.steps = 30;
        c
    }

    #[test]
    fn golden_is_deterministic() {
        let a = golden_run(&small().run).unwrap();
        let b = golden_run(&small().run).unwrap();
        assert_eq!(a.state.to_dump(), b.state.to_dump());
        assert_eq!(a.sites, b.sites);
        assert_eq!(a.log.len(), 30);
        assert!(a.sites.xor > 0);
    }

    #[test]
    fn uniform_golden_log_is_constant() {
        let mut c = small();
        c.run.app = super::super::config::App::Uniform;
        let g = golden_run(&c.run).unwrap();
        assert_eq!(g.sites.xor, 0);
        assert!(g.log.iter().all(|e| e.invariants == g.log[0].invariants));
    }

    #[test]
    fn unexecuted_class_is_benign() {
        let mut c = small();
        c.run.app = super::super::config::App::Uniform;
        let g = golden_run(&c.run).unwrap();
        let spec = FaultSpec::new(InstrClass::Xor, 0, Target::Result, 3).unwrap();
        for recovery in [false, true] {
            let r = run_trial(&c, &g.fields(), spec, recovery).unwrap();
            assert!(!r.fired);
            assert_eq!(r.outcome, OutcomeClass::Benign);
            assert_eq!(r.max_rel_error, Some(0.0));
        }
    }

    #[test]
    fn far_index_corruption_crashes() {
        let c = small();
        let g = golden_run(&c.run).unwrap();
        let spec = FaultSpec::new(InstrClass::Cmp, 10, Target::Result, 20)
            .unwrap()
            .with_mode(CmpMode::Addressing);
        let r = run_trial(&c, &g.fields(), spec, false).unwrap();
        assert!(r.fired);
        assert_eq!(r.outcome, OutcomeClass::Crash);
        assert!(matches!(r.signal, Some(Signal::Crash { .. })));
        let on = run_trial(&c, &g.fields(), spec, true).unwrap();
        assert_eq!(on.outcome, OutcomeClass::Crash);
    }

    #[test]
    fn transient_flux_flip_is_recovered() {
        let c = small();
        let g = golden_run(&c.run).unwrap();
        // First sign flip of an addition that corrupts the unguarded run.
        let (spec, off) = (0..g.sites.fadd)
            .step_by(101)
            .map(|i| FaultSpec::new(InstrClass::Fadd, i, Target::Result, 63).unwrap())
            .map(|spec| (spec, run_trial(&c, &g.fields(), spec, false).unwrap()))
            .find(|(_, r)| matches!(r.outcome, OutcomeClass::Sdc | OutcomeClass::AssertionFailure))
            .expect("some sign flip corrupts the run");
        assert!(off.fired);
        let on = run_trial(&c, &g.fields(), spec, true).unwrap();
        assert_eq!(on.outcome, OutcomeClass::DetectedRecovered);
        assert_eq!(on.max_rel_error, Some(0.0));
        assert_eq!(on.retries_used, 1);
        assert_eq!(on.trace.fired_at_iteration, off.trace.fired_at_iteration);
    }

    #[test]
    fn golden_artifacts_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = golden_run(&small().run).unwrap();
        g.write_to(dir.path()).unwrap();
        assert_eq!(load_golden(dir.path()).unwrap(), g.fields());
        let log = fs::read_to_string(dir.path().join(GOLDEN_LOG_FILE)).unwrap();
        assert_eq!(log.lines().count(), 31);
        assert!(matches!(
            load_golden(&dir.path().join("missing")),
            Err(CampaignError::Usage(_))
        ));
    }
}
