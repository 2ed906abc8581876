//! Instrumented arithmetic facade.
//!
//! Every floating-point and index operation of the solver loop is issued
//! through an [`Arith`] context. Five operation kinds carry an injection
//! class (`fadd` for add/subtract, `fmul`, `cmp`, `imul`, `xor`); each call
//! advances a per-class dynamic counter, and when an armed [`FaultSpec`]
//! matches the current site a single bit of an operand or of the result is
//! flipped. Division and square root go through the facade as plain
//! passthroughs: they have no injection class.
//!
//! A disarmed context costs one counter increment and one branch per call.
//!
//! [`FaultSpec`]: crate::inject::FaultSpec

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::inject::ArmedFault;

/// Instruction classes that can be targeted by a fault.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstrClass {
    Fadd,
    Fmul,
    Cmp,
    Imul,
    Xor,
}

impl InstrClass {
    pub const ALL: [InstrClass; 5] = [
        InstrClass::Fadd,
        InstrClass::Fmul,
        InstrClass::Cmp,
        InstrClass::Imul,
        InstrClass::Xor,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InstrClass::Fadd => "fadd",
            InstrClass::Fmul => "fmul",
            InstrClass::Cmp => "cmp",
            InstrClass::Imul => "imul",
            InstrClass::Xor => "xor",
        }
    }
}

impl fmt::Display for InstrClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InstrClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        InstrClass::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown instruction class `{s}`"))
    }
}

/// Part of the solver loop currently executing. Recorded in the injection
/// trace so campaign results can be attributed to the code that was hit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    #[default]
    Setup,
    Flux,
    Timestep,
    Update,
    Invariants,
    Probe,
}

/// Per-class dynamic instance counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteCounts {
    pub fadd: u64,
    pub fmul: u64,
    pub cmp: u64,
    pub imul: u64,
    pub xor: u64,
}

impl SiteCounts {
    pub fn get(&self, class: InstrClass) -> u64 {
        match class {
            InstrClass::Fadd => self.fadd,
            InstrClass::Fmul => self.fmul,
            InstrClass::Cmp => self.cmp,
            InstrClass::Imul => self.imul,
            InstrClass::Xor => self.xor,
        }
    }
}

/// An index that fell outside the array it addresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[error("index {index} outside 0..{len}")]
pub struct AccessViolation {
    pub index: i64,
    pub len: usize,
}

/// Bounds check for an index that may have been corrupted.
#[inline]
pub fn check_index(index: i64, len: usize) -> Result<usize, AccessViolation> {
    if index >= 0 && (index as u64) < len as u64 {
        Ok(index as usize)
    } else {
        Err(AccessViolation { index, len })
    }
}

/// Ordering used by `cmp`. Unordered operands (NaN) compare as `Less`, so a
/// "greater than" branch is not taken, as with `ucomisd`/`ja`.
#[inline]
pub fn compare(a: f64, b: f64) -> Ordering {
    a.partial_cmp(&b).unwrap_or(Ordering::Less)
}

/// Branch inversion for a "greater than" predicate.
#[inline]
pub(crate) fn invert(ord: Ordering) -> Ordering {
    if ord == Ordering::Greater {
        Ordering::Less
    } else {
        Ordering::Greater
    }
}

/// Per-trial arithmetic context: dynamic counters plus at most one armed fault.
#[derive(Debug, Default)]
pub struct Arith {
    counts: [u64; 5],
    pub(crate) region: Region,
    pub(crate) iteration: u64,
    pub(crate) in_iteration: bool,
    pub(crate) fault: Option<Box<ArmedFault>>,
}

impl Arith {
    pub fn new() -> Self {
        Self::default()
    }

    /// Counts of dynamic instances executed so far.
    pub fn site_counter_snapshot(&self) -> SiteCounts {
        SiteCounts {
            fadd: self.counts[0],
            fmul: self.counts[1],
            cmp: self.counts[2],
            imul: self.counts[3],
            xor: self.counts[4],
        }
    }

    pub fn region(&self) -> Region {
        self.region
    }

    #[inline]
    pub fn set_region(&mut self, region: Region) {
        self.region = region;
    }

    pub fn begin_iteration(&mut self, iteration: u64) {
        self.iteration = iteration;
        self.in_iteration = true;
    }

    pub fn end_iteration(&mut self) {
        self.in_iteration = false;
    }

    #[inline(always)]
    fn tick(&mut self, class: InstrClass) -> u64 {
        let slot = &mut self.counts[class as usize];
        let site = *slot;
        *slot += 1;
        site
    }

    #[inline]
    pub fn fadd(&mut self, a: f64, b: f64) -> f64 {
        let site = self.tick(InstrClass::Fadd);
        if let Some(fault) = self.fault.as_deref_mut() {
            if fault.matches(InstrClass::Fadd, site) {
                return fault.fire_float(a, b, |x, y| x + y, self.iteration, self.region);
            }
        }
        a + b
    }

    /// Subtraction; counted and injected as `fadd`.
    #[inline]
    pub fn fsub(&mut self, a: f64, b: f64) -> f64 {
        let site = self.tick(InstrClass::Fadd);
        if let Some(fault) = self.fault.as_deref_mut() {
            if fault.matches(InstrClass::Fadd, site) {
                return fault.fire_float(a, b, |x, y| x - y, self.iteration, self.region);
            }
        }
        a - b
    }

    #[inline]
    pub fn fmul(&mut self, a: f64, b: f64) -> f64 {
        let site = self.tick(InstrClass::Fmul);
        if let Some(fault) = self.fault.as_deref_mut() {
            if fault.matches(InstrClass::Fmul, site) {
                return fault.fire_float(a, b, |x, y| x * y, self.iteration, self.region);
            }
        }
        a * b
    }

    #[inline(always)]
    pub fn div(&mut self, a: f64, b: f64) -> f64 {
        a / b
    }

    #[inline(always)]
    pub fn sqrt(&mut self, a: f64) -> f64 {
        a.sqrt()
    }

    /// Floating comparison. The fault's mode decides what an armed flip does:
    /// data mode corrupts an operand (or the predicate outcome), addressing
    /// mode inverts the predicate and corrupts the next checked index.
    #[inline]
    pub fn cmp(&mut self, a: f64, b: f64) -> Ordering {
        let site = self.tick(InstrClass::Cmp);
        if let Some(fault) = self.fault.as_deref_mut() {
            if fault.matches(InstrClass::Cmp, site) {
                return fault.fire_cmp(a, b, self.iteration, self.region);
            }
        }
        compare(a, b)
    }

    /// Wrapping signed multiply used for index scaling.
    #[inline]
    pub fn imul(&mut self, a: i64, b: i64) -> i64 {
        let site = self.tick(InstrClass::Imul);
        if let Some(fault) = self.fault.as_deref_mut() {
            if fault.matches(InstrClass::Imul, site) {
                let bits = fault.fire_int(
                    a as u64,
                    b as u64,
                    |x, y| x.wrapping_mul(y),
                    self.iteration,
                    self.region,
                );
                return bits as i64;
            }
        }
        a.wrapping_mul(b)
    }

    #[inline]
    pub fn xor(&mut self, a: u64, b: u64) -> u64 {
        let site = self.tick(InstrClass::Xor);
        if let Some(fault) = self.fault.as_deref_mut() {
            if fault.matches(InstrClass::Xor, site) {
                return fault.fire_int(a, b, |x, y| x ^ y, self.iteration, self.region);
            }
        }
        a ^ b
    }

    /// Checked access to `index` of an array of `len` entries. A pending
    /// addressing-mode corruption is applied first; an index that ends up
    /// out of range is the modeled crash.
    #[inline]
    pub fn corrupt_index(&mut self, index: usize, len: usize) -> Result<usize, AccessViolation> {
        let mut idx = index as i64;
        if let Some(fault) = self.fault.as_deref_mut() {
            if let Some(bit) = fault.pending_index.take() {
                let corrupted = (idx as u64 ^ (1u64 << bit)) as i64;
                fault.record_index(idx, corrupted);
                idx = corrupted;
            }
        }
        check_index(idx, len)
    }
}
