//! Single-bit fault construction, sampling and arming.
//!
//! One [`FaultSpec`] describes one injection: which instruction class, which
//! dynamic instance of it, which operand (or the result), which bit. Arming a
//! spec on an [`Arith`] context makes the matching hooked operation flip that
//! bit; disarming hands back the [`InjectionOutcomeTrace`].

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::arith::{compare, invert, Arith, InstrClass, Region};
use crate::rng::XorShift64Star;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum InjectError {
    #[error("bit index {0} out of range 0..=63")]
    BitOutOfRange(u32),
    #[error("class `{0}` has no executed sites in this program")]
    NoSites(InstrClass),
    #[error("context already armed; disarm first")]
    AlreadyArmed,
    #[error("cannot arm a context in the middle of an iteration")]
    MidIteration,
}

/// What the flip lands on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    OperandA,
    OperandB,
    Result,
}

/// How a `cmp` fault manifests. Ignored for other classes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CmpMode {
    /// The comparison feeds data selection only; an operand bit (or the
    /// predicate outcome) is corrupted.
    #[default]
    Data,
    /// The comparison drives addressing: the branch is inverted and the next
    /// checked index access is corrupted.
    Addressing,
}

impl CmpMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CmpMode::Data => "data",
            CmpMode::Addressing => "addressing",
        }
    }
}

impl std::str::FromStr for CmpMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "data" => Ok(CmpMode::Data),
            "addressing" => Ok(CmpMode::Addressing),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

/// One injected fault. Serialized with keys
/// `{class, dynamic_index, target, bit, mode, sticky, seed}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FaultSpec {
    pub class: InstrClass,
    pub dynamic_index: u64,
    pub target: Target,
    pub bit: u8,
    #[serde(default)]
    pub mode: CmpMode,
    /// Fire at every site of the class at or after `dynamic_index`.
    #[serde(default)]
    pub sticky: bool,
    /// Seed the spec was sampled from, if any.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl FaultSpec {
    pub fn new(class: InstrClass, dynamic_index: u64, target: Target, bit: u32) -> Result<Self, InjectError> {
        if bit > 63 {
            return Err(InjectError::BitOutOfRange(bit));
        }
        Ok(Self {
            class,
            dynamic_index,
            target,
            bit: bit as u8,
            mode: CmpMode::Data,
            sticky: false,
            seed: None,
        })
    }

    pub fn with_mode(mut self, mode: CmpMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn sticky(mut self) -> Self {
        self.sticky = true;
        self
    }

    pub fn validate(&self) -> Result<(), InjectError> {
        if self.bit > 63 {
            return Err(InjectError::BitOutOfRange(self.bit as u32));
        }
        Ok(())
    }
}

/// Toggle exactly one bit of a 64-bit pattern.
pub fn apply_flip(bits: u64, bit_index: u32) -> Result<u64, InjectError> {
    if bit_index > 63 {
        return Err(InjectError::BitOutOfRange(bit_index));
    }
    Ok(bits ^ (1u64 << bit_index))
}

#[inline]
fn flip_f64(x: f64, bit: u8) -> f64 {
    f64::from_bits(x.to_bits() ^ (1u64 << bit))
}

/// Sample a fault uniformly over the profiled dynamic instances of `class`:
/// dynamic index, bit and target are each uniform and fully determined by
/// `seed`. The mode defaults to data.
pub fn sample_site(seed: u64, class: InstrClass, profiled_count: u64) -> Result<FaultSpec, InjectError> {
    if profiled_count == 0 {
        return Err(InjectError::NoSites(class));
    }
    let mut rng = XorShift64Star::new(seed);
    let dynamic_index = rng.below(profiled_count);
    let bit = (rng.next_u64() >> 58) as u8;
    let target = [Target::OperandA, Target::OperandB, Target::Result][rng.below(3) as usize];
    Ok(FaultSpec {
        class,
        dynamic_index,
        target,
        bit,
        mode: CmpMode::Data,
        sticky: false,
        seed: Some(seed),
    })
}

/// Old and new value of an index corrupted through the addressing channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexCorruption {
    pub original: i64,
    pub corrupted: i64,
}

/// Audit trail of an armed fault. Bits describe the first firing; for `cmp`
/// predicate corruptions they are the "greater than" flag (0 or 1).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionOutcomeTrace {
    pub fired: bool,
    pub firings: u64,
    pub fired_at_iteration: Option<u64>,
    pub region: Option<Region>,
    pub original_bits: u64,
    pub corrupted_bits: u64,
    pub index_corruption: Option<IndexCorruption>,
}

#[derive(Debug)]
pub(crate) struct ArmedFault {
    spec: FaultSpec,
    trace: InjectionOutcomeTrace,
    pub(crate) pending_index: Option<u8>,
}

impl ArmedFault {
    #[inline(always)]
    pub(crate) fn matches(&self, class: InstrClass, site: u64) -> bool {
        class == self.spec.class
            && if self.spec.sticky {
                site >= self.spec.dynamic_index
            } else {
                site == self.spec.dynamic_index
            }
    }

    fn record(&mut self, original: u64, corrupted: u64, iteration: u64, region: Region) {
        if !self.trace.fired {
            self.trace.fired = true;
            self.trace.fired_at_iteration = Some(iteration);
            self.trace.region = Some(region);
            self.trace.original_bits = original;
            self.trace.corrupted_bits = corrupted;
        }
        self.trace.firings += 1;
    }

    pub(crate) fn record_index(&mut self, original: i64, corrupted: i64) {
        if self.trace.index_corruption.is_none() {
            self.trace.index_corruption = Some(IndexCorruption { original, corrupted });
        }
    }

    #[cold]
    #[inline(never)]
    pub(crate) fn fire_float(
        &mut self,
        a: f64,
        b: f64,
        op: fn(f64, f64) -> f64,
        iteration: u64,
        region: Region,
    ) -> f64 {
        let bit = self.spec.bit;
        match self.spec.target {
            Target::OperandA => {
                let c = flip_f64(a, bit);
                self.record(a.to_bits(), c.to_bits(), iteration, region);
                op(c, b)
            }
            Target::OperandB => {
                let c = flip_f64(b, bit);
                self.record(b.to_bits(), c.to_bits(), iteration, region);
                op(a, c)
            }
            Target::Result => {
                let r = op(a, b);
                let c = flip_f64(r, bit);
                self.record(r.to_bits(), c.to_bits(), iteration, region);
                c
            }
        }
    }

    #[cold]
    #[inline(never)]
    pub(crate) fn fire_int(&mut self, a: u64, b: u64, op: fn(u64, u64) -> u64, iteration: u64, region: Region) -> u64 {
        let mask = 1u64 << self.spec.bit;
        match self.spec.target {
            Target::OperandA => {
                self.record(a, a ^ mask, iteration, region);
                op(a ^ mask, b)
            }
            Target::OperandB => {
                self.record(b, b ^ mask, iteration, region);
                op(a, b ^ mask)
            }
            Target::Result => {
                let r = op(a, b);
                self.record(r, r ^ mask, iteration, region);
                r ^ mask
            }
        }
    }

    #[cold]
    #[inline(never)]
    pub(crate) fn fire_cmp(&mut self, a: f64, b: f64, iteration: u64, region: Region) -> Ordering {
        let flag = |o: Ordering| (o == Ordering::Greater) as u64;
        if self.spec.mode == CmpMode::Addressing {
            let ord = compare(a, b);
            let inverted = invert(ord);
            self.record(flag(ord), flag(inverted), iteration, region);
            self.pending_index = Some(self.spec.bit);
            return inverted;
        }
        let bit = self.spec.bit;
        match self.spec.target {
            Target::OperandA => {
                let c = flip_f64(a, bit);
                self.record(a.to_bits(), c.to_bits(), iteration, region);
                compare(c, b)
            }
            Target::OperandB => {
                let c = flip_f64(b, bit);
                self.record(b.to_bits(), c.to_bits(), iteration, region);
                compare(a, c)
            }
            Target::Result => {
                let ord = compare(a, b);
                let inverted = invert(ord);
                self.record(flag(ord), flag(inverted), iteration, region);
                inverted
            }
        }
    }
}

impl Arith {
    /// Arm `spec`: subsequent hooked operations consult it.
    pub fn arm(&mut self, spec: FaultSpec) -> Result<(), InjectError> {
        spec.validate()?;
        if self.fault.is_some() {
            return Err(InjectError::AlreadyArmed);
        }
        if self.in_iteration {
            return Err(InjectError::MidIteration);
        }
        self.fault = Some(Box::new(ArmedFault {
            spec,
            trace: InjectionOutcomeTrace::default(),
            pending_index: None,
        }));
        Ok(())
    }

    /// Clear the armed fault and return what it did, if one was armed.
    pub fn disarm(&mut self) -> Option<InjectionOutcomeTrace> {
        self.fault.take().map(|f| f.trace)
    }

    pub fn is_armed(&self) -> bool {
        self.fault.is_some()
    }

    /// Trace of the armed fault so far, without disarming.
    pub fn trace(&self) -> Option<InjectionOutcomeTrace> {
        self.fault.as_ref().map(|f| f.trace)
    }
}
