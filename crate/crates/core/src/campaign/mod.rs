//! Fault-injection campaigns: golden and profiling runs, sampled trials,
//! outcome classification and aggregated reports.

pub mod config;
pub mod overhead;
pub mod report;
pub mod trial;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arith::InstrClass;
use crate::inject::{sample_site, CmpMode, FaultSpec, InjectError};
use crate::rng::trial_seed;
use crate::solver::FieldDump;

pub use config::{App, CampaignConfig, RecoveryMode, RunConfig};
pub use overhead::{measure_overhead, OverheadMeasurement};
pub use report::{aggregate, write_report, CampaignReport, ReportFormat};
pub use trial::{
    classify, golden_run, max_rel_error, run_trial, run_trial_checked, Golden, InvalidTrial, OutcomeClass, Signal,
    TrialRecord,
};

pub const THREADS_ENV: &str = "CAMPAIGN_THREADS";
pub const TRIALS_FILE: &str = "trials.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum CampaignError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("class `{0}` has no dynamic sites in this program (N/A)")]
    NoSites(InstrClass),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CampaignError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CampaignError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn csv(path: &Path, e: csv::Error) -> Self {
        CampaignError::io(path, std::io::Error::other(e))
    }
}

/// Everything needed to regenerate a campaign.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignPlan {
    pub config: CampaignConfig,
    pub class: InstrClass,
    pub mode: CmpMode,
    pub trials: u64,
    pub seed: u64,
    pub recovery: RecoveryMode,
}

impl CampaignPlan {
    /// One spec per trial, sampled uniformly over the profiled sites.
    pub fn sample_specs(&self, golden: &Golden) -> Result<Vec<FaultSpec>, CampaignError> {
        let count = golden.sites.get(self.class);
        (0..self.trials)
            .map(|i| {
                sample_site(trial_seed(self.seed, i), self.class, count)
                    .map(|s| s.with_mode(self.mode))
                    .map_err(|e| match e {
                        InjectError::NoSites(c) => CampaignError::NoSites(c),
                        other => CampaignError::Config(other.to_string()),
                    })
            })
            .collect()
    }
}

/// Runs one trial; lets callers substitute process isolation.
pub trait TrialExecutor: Sync {
    fn execute(
        &self,
        cfg: &CampaignConfig,
        golden: &FieldDump,
        spec: FaultSpec,
        recovery_enabled: bool,
    ) -> Result<TrialRecord, InvalidTrial>;
}

/// In-process execution with panics caught.
pub struct InProcess;

impl TrialExecutor for InProcess {
    fn execute(
        &self,
        cfg: &CampaignConfig,
        golden: &FieldDump,
        spec: FaultSpec,
        recovery_enabled: bool,
    ) -> Result<TrialRecord, InvalidTrial> {
        run_trial_checked(cfg, golden, spec, recovery_enabled)
    }
}

#[derive(Clone, Debug)]
pub struct CampaignRun {
    pub golden: Golden,
    /// In spec order; twins are adjacent (recovery off first).
    pub records: Vec<TrialRecord>,
    pub excluded: Vec<InvalidTrial>,
}

/// Thread cap from `CAMPAIGN_THREADS`, if set to a positive integer.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

pub fn run_campaign(
    plan: &CampaignPlan,
    executor: &dyn TrialExecutor,
    threads: Option<usize>,
) -> Result<CampaignRun, CampaignError> {
    plan.config.validate()?;
    let golden = golden_run(&plan.config.run)?;
    let specs = plan.sample_specs(&golden)?;
    let fields = golden.fields();
    let jobs: Vec<(FaultSpec, bool)> = specs
        .iter()
        .flat_map(|&s| plan.recovery.settings().iter().map(move |&r| (s, r)))
        .collect();
    let work = || -> Vec<Result<TrialRecord, InvalidTrial>> {
        jobs.par_iter()
            .map(|&(spec, recovery)| executor.execute(&plan.config, &fields, spec, recovery))
            .collect()
    };
    let results = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CampaignError::Config(e.to_string()))?
            .install(work),
        None => work(),
    };
    let mut records = Vec::with_capacity(results.len());
    let mut excluded = Vec::new();
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(bad) => excluded.push(bad),
        }
    }
    Ok(CampaignRun {
        golden,
        records,
        excluded,
    })
}

/// One line of a trials file: the record with the configuration it ran under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub config: CampaignConfig,
    pub record: TrialRecord,
}

pub fn write_trials_jsonl(path: &Path, config: &CampaignConfig, records: &[TrialRecord]) -> Result<(), CampaignError> {
    let file = fs::File::create(path).map_err(|e| CampaignError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for record in records {
        let entry = ReplayEntry {
            config: config.clone(),
            record: record.clone(),
        };
        serde_json::to_writer(&mut w, &entry).map_err(|e| CampaignError::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| CampaignError::io(path, e))?;
    }
    w.flush().map_err(|e| CampaignError::io(path, e))
}

/// Entries of a JSON-lines trials file, or of a file holding a single entry.
pub fn read_replay_entries(path: &Path) -> Result<Vec<ReplayEntry>, CampaignError> {
    let text = fs::read_to_string(path).map_err(|e| CampaignError::io(path, e))?;
    if let Ok(entry) = serde_json::from_str::<ReplayEntry>(&text) {
        return Ok(vec![entry]);
    }
    let entries = text
        .lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(n, line)| {
            serde_json::from_str::<ReplayEntry>(line)
                .map_err(|e| CampaignError::Usage(format!("{}:{}: {e}", path.display(), n + 1)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if entries.is_empty() {
        return Err(CampaignError::Usage(format!("{}: no trial records", path.display())));
    }
    Ok(entries)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayOutcome {
    pub recorded: TrialRecord,
    pub replayed: TrialRecord,
    pub matches: bool,
}

/// Re-run a recorded trial from its configuration and spec.
pub fn replay(entry: &ReplayEntry) -> Result<ReplayOutcome, CampaignError> {
    let golden = golden_run(&entry.config.run)?;
    let replayed = run_trial(
        &entry.config,
        &golden.fields(),
        entry.record.fault_spec,
        entry.record.recovery_enabled,
    )?;
    Ok(ReplayOutcome {
        matches: replayed.same_outcome(&entry.record),
        recorded: entry.record.clone(),
        replayed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(class: InstrClass, trials: u64) -> CampaignPlan {
        let mut config = CampaignConfig::default();
        config.run.cells = 40;
        config.run.steps = 30;
        CampaignPlan {
            config,
            class,
            mode: CmpMode::Data,
            trials,
            seed: 17,
            recovery: RecoveryMode::Twin,
        }
    }

    #[test]
    fn twin_campaign_is_deterministic_and_ordered() {
        let p = plan(InstrClass::Fmul, 12);
        let a = run_campaign(&p, &InProcess, Some(2)).unwrap();
        let b = run_campaign(&p, &InProcess, None).unwrap();
        assert_eq!(a.records.len(), 24);
        assert!(a.excluded.is_empty());
        for (x, y) in a.records.iter().zip(&b.records) {
            assert!(x.same_outcome(y));
        }
        for pair in a.records.chunks(2) {
            assert_eq!(pair[0].fault_spec, pair[1].fault_spec);
            assert!(!pair[0].recovery_enabled && pair[1].recovery_enabled);
        }
    }

    #[test]
    fn unused_class_is_not_applicable() {
        let mut p = plan(InstrClass::Xor, 3);
        p.config.run.app = App::Uniform;
        assert!(matches!(
            run_campaign(&p, &InProcess, None),
            Err(CampaignError::NoSites(InstrClass::Xor))
        ));
    }

    #[test]
    fn panicking_trial_is_excluded() {
        struct Panics;
        impl TrialExecutor for Panics {
            fn execute(
                &self,
                cfg: &CampaignConfig,
                golden: &FieldDump,
                spec: FaultSpec,
                recovery: bool,
            ) -> Result<TrialRecord, InvalidTrial> {
                let bad = FieldDump {
                    rho: vec![],
                    ..golden.clone()
                };
                run_trial_checked(cfg, if recovery { &bad } else { golden }, spec, recovery)
            }
        }
        let r = run_campaign(&plan(InstrClass::Fadd, 2), &Panics, None).unwrap();
        assert_eq!(r.records.len(), 2);
        assert_eq!(r.excluded.len(), 2);
        assert!(r.excluded[0].reason.contains("panic"));
    }

    #[test]
    fn replay_file_round_trip() {
        let p = plan(InstrClass::Fadd, 3);
        let run = run_campaign(&p, &InProcess, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(TRIALS_FILE);
        write_trials_jsonl(&path, &p.config, &run.records).unwrap();
        let entries = read_replay_entries(&path).unwrap();
        assert_eq!(entries.len(), 6);
        for e in &entries {
            assert!(replay(e).unwrap().matches);
        }
        let single = dir.path().join("one.json");
        fs::write(&single, serde_json::to_string_pretty(&entries[1]).unwrap()).unwrap();
        assert_eq!(read_replay_entries(&single).unwrap(), vec![entries[1].clone()]);
    }
}
