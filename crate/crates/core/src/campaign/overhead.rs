use std::hint::black_box;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::arith::Arith;

use super::config::CampaignConfig;
use super::trial::execute;
use super::CampaignError;

pub const MIN_REPEATS: usize = 5;
/// A timed run must last this many timer ticks.
const MIN_TICKS_PER_RUN: u32 = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Guarded,
    Unguarded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverheadMeasurement {
    /// Wall times in seconds of the measured side.
    pub measured: Vec<f64>,
    /// Wall times in seconds of the baseline side.
    pub baseline: Vec<f64>,
    pub ratio: f64,
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty list");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// `median(measured) / median(baseline) - 1`.
pub fn overhead_ratio(measured: &[f64], baseline: &[f64]) -> f64 {
    median(measured) / median(baseline) - 1.0
}

/// Smallest nonzero step of the monotonic clock seen over a short sample.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..200 {
        let start = Instant::now();
        let mut now = Instant::now();
        while now == start {
            now = Instant::now();
        }
        best = best.min(now - start);
    }
    best
}

fn timed_run(cfg: &CampaignConfig, side: Side) -> Result<f64, CampaignError> {
    let guard = (side == Side::Guarded).then_some(&cfg.guard);
    let start = Instant::now();
    let result = execute(&cfg.run, &mut Arith::new(), guard, None)?;
    let elapsed = start.elapsed().as_secs_f64();
    if result.signal.is_some() || result.rollbacks > 0 {
        return Err(CampaignError::Config(format!(
            "fault-free {side:?} run did not complete cleanly: {:?}",
            result.signal
        )));
    }
    black_box(result.state);
    Ok(elapsed)
}

/// Alternating fault-free runs of two sides, one warm-up run each.
pub fn measure(
    cfg: &CampaignConfig,
    repeats: usize,
    measured: Side,
    baseline: Side,
) -> Result<OverheadMeasurement, CampaignError> {
    if repeats < MIN_REPEATS {
        return Err(CampaignError::Usage(format!(
            "overhead needs at least {MIN_REPEATS} repeats, got {repeats}"
        )));
    }
    cfg.validate()?;
    timed_run(cfg, baseline)?;
    timed_run(cfg, measured)?;
    let resolution = timer_resolution().as_secs_f64();
    let mut m = Vec::with_capacity(repeats);
    let mut b = Vec::with_capacity(repeats);
    for i in 0..repeats {
        if i % 2 == 0 {
            b.push(timed_run(cfg, baseline)?);
            m.push(timed_run(cfg, measured)?);
        } else {
            m.push(timed_run(cfg, measured)?);
            b.push(timed_run(cfg, baseline)?);
        }
    }
    let shortest = m.iter().chain(&b).copied().fold(f64::INFINITY, f64::min);
    if shortest < MIN_TICKS_PER_RUN as f64 * resolution {
        log::warn!("timed runs of {shortest:e} s are too short for a {resolution:e} s timer");
        return Err(CampaignError::Usage(format!(
            "runs of {shortest:e} s are under {MIN_TICKS_PER_RUN} timer ticks ({resolution:e} s); use more cells or steps"
        )));
    }
    Ok(OverheadMeasurement {
        ratio: overhead_ratio(&m, &b),
        measured: m,
        baseline: b,
    })
}

/// Guarded fault-free runs against unguarded ones.
pub fn measure_overhead(cfg: &CampaignConfig, repeats: usize) -> Result<OverheadMeasurement, CampaignError> {
    measure(cfg, repeats, Side::Guarded, Side::Unguarded)
}
