use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::arith::InstrClass;
use crate::inject::CmpMode;

use super::trial::{InvalidTrial, OutcomeClass, TrialRecord};
use super::{CampaignError, CampaignPlan};

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!("unknown report format `{other}`")),
        }
    }
}

/// Statistics of one (class, cmp mode, recovery setting) group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub class: InstrClass,
    /// Set for `cmp` only.
    pub mode: Option<CmpMode>,
    pub recovery_enabled: bool,
    pub trials: u64,
    /// Every outcome kind, zero counts included.
    pub histogram: BTreeMap<OutcomeClass, u64>,
    pub failure_rate: f64,
    pub fired: u64,
    pub benign_fired: u64,
    pub benign_not_fired: u64,
}

impl GroupStats {
    pub fn count(&self, outcome: OutcomeClass) -> u64 {
        self.histogram.get(&outcome).copied().unwrap_or(0)
    }

    pub fn rate(&self, outcome: OutcomeClass) -> f64 {
        self.count(outcome) as f64 / self.trials as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub tool_version: String,
    pub config: Option<CampaignPlan>,
    pub groups: Vec<GroupStats>,
    pub excluded: Vec<InvalidTrial>,
    /// Fault-free guarded/unguarded wall-time ratio minus one, if measured.
    pub overhead_ratio: Option<f64>,
}

type GroupKey = (InstrClass, Option<CmpMode>, bool);

fn key(r: &TrialRecord) -> GroupKey {
    let class = r.fault_spec.class;
    let mode = (class == InstrClass::Cmp).then_some(r.fault_spec.mode);
    (class, mode, r.recovery_enabled)
}

/// Fold records into per-group histograms. Failure rate counts every outcome
/// other than `benign` and `detected_recovered`.
pub fn aggregate(
    records: &[TrialRecord],
    excluded: &[InvalidTrial],
    config: Option<&CampaignPlan>,
) -> Result<CampaignReport, CampaignError> {
    if records.is_empty() {
        return Err(CampaignError::Usage("no trial records to aggregate".into()));
    }
    let mut groups: BTreeMap<GroupKey, GroupStats> = BTreeMap::new();
    for r in records {
        let (class, mode, recovery_enabled) = key(r);
        let g = groups
            .entry((class, mode, recovery_enabled))
            .or_insert_with(|| GroupStats {
                class,
                mode,
                recovery_enabled,
                trials: 0,
                histogram: OutcomeClass::ALL.iter().map(|&o| (o, 0)).collect(),
                failure_rate: 0.0,
                fired: 0,
                benign_fired: 0,
                benign_not_fired: 0,
            });
        g.trials += 1;
        *g.histogram.get_mut(&r.outcome).unwrap() += 1;
        g.fired += r.fired as u64;
        if r.outcome == OutcomeClass::Benign {
            if r.fired {
                g.benign_fired += 1;
            } else {
                g.benign_not_fired += 1;
            }
        }
    }
    let groups = groups
        .into_values()
        .map(|mut g| {
            let failures: u64 = g.histogram.iter().filter(|(o, _)| o.is_failure()).map(|(_, n)| n).sum();
            g.failure_rate = failures as f64 / g.trials as f64;
            g
        })
        .collect();
    Ok(CampaignReport {
        tool_version: TOOL_VERSION.to_string(),
        config: config.cloned(),
        groups,
        excluded: excluded.to_vec(),
        overhead_ratio: None,
    })
}

fn mode_label(mode: Option<CmpMode>) -> &'static str {
    mode.map(CmpMode::as_str).unwrap_or("")
}

/// CSV form: one row per (class, mode, recovery, outcome) with count and rate.
pub fn report_csv(report: &CampaignReport) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["class", "mode", "recovery", "outcome", "count", "rate"])?;
    for g in &report.groups {
        for outcome in OutcomeClass::ALL {
            w.write_record([
                g.class.as_str(),
                mode_label(g.mode),
                if g.recovery_enabled { "on" } else { "off" },
                outcome.as_str(),
                &g.count(outcome).to_string(),
                &g.rate(outcome).to_string(),
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_report(report: &CampaignReport, path: &Path, format: ReportFormat) -> Result<(), CampaignError> {
    let text = match format {
        ReportFormat::Json => serde_json::to_string_pretty(report).expect("report serializes"),
        ReportFormat::Csv => report_csv(report).map_err(|e| CampaignError::csv(path, e))?,
    };
    fs::write(path, text).map_err(|e| CampaignError::io(path, e))
}

pub fn read_report(path: &Path) -> Result<CampaignReport, CampaignError> {
    let text = fs::read_to_string(path).map_err(|e| CampaignError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CampaignError::Usage(format!("{}: {e}", path.display())))
}

/// Serde name of a unit enum variant.
fn serde_name<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        _ => String::new(),
    }
}

/// Plot-ready per-trial table.
pub fn write_trials_csv(records: &[TrialRecord], path: &Path) -> Result<(), CampaignError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CampaignError::csv(path, e))?;
    let csv_err = |e| CampaignError::csv(path, e);
    w.write_record([
        "seed",
        "class",
        "mode",
        "dynamic_index",
        "target",
        "bit",
        "recovery",
        "outcome",
        "fired",
        "fired_at_iteration",
        "region",
        "max_rel_error",
        "retries_used",
        "wall_time",
    ])
    .map_err(csv_err)?;
    for r in records {
        let s = &r.fault_spec;
        w.write_record([
            r.seed.map(|s| s.to_string()).unwrap_or_default(),
            s.class.to_string(),
            serde_name(&s.mode),
            s.dynamic_index.to_string(),
            serde_name(&s.target),
            s.bit.to_string(),
            if r.recovery_enabled { "on".into() } else { "off".into() },
            r.outcome.to_string(),
            r.fired.to_string(),
            r.trace.fired_at_iteration.map(|k| k.to_string()).unwrap_or_default(),
            r.trace.region.as_ref().map(serde_name).unwrap_or_default(),
            r.max_rel_error.map(|e| format!("{e:e}")).unwrap_or_default(),
            r.retries_used.to_string(),
            format!("{:.6e}", r.wall_time),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| CampaignError::io(path, e))
}
