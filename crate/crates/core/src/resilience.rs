//! Checksum-retry guard.
//!
//! A [`GuardedRun`] wraps a user iteration function. After every iteration
//! the conserved totals are compared with the reference taken from the
//! initial state. A match commits the new state into the single snapshot
//! (overwritten in place, together with its MD5 digest); a discrepancy or a
//! recoverable solver error restores the snapshot and the iteration is
//! retried, up to `retry_limit` consecutive times.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use md5::{Digest as _, Md5};
use serde::{Deserialize, Serialize};

use crate::arith::Arith;
use crate::solver::{compute_invariants, Invariants, SolverError, State};

pub const DEFAULT_TOLERANCE: f64 = 1e-12;
pub const DEFAULT_RETRY_LIMIT: u32 = 3;
const ZERO_FLOOR: f64 = 1e-300;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DigestAlgorithm {
    #[default]
    Md5,
}

impl FromStr for DigestAlgorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "md5" => Ok(DigestAlgorithm::Md5),
            _ => Err(format!("unsupported digest algorithm `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("tolerance must be a nonnegative number, got {0}")]
    Tolerance(f64),
    #[error("retry_limit must be at least 1")]
    RetryLimit,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuardConfig {
    pub tolerance: f64,
    pub retry_limit: u32,
    pub digest: DigestAlgorithm,
}

impl Default for GuardConfig {
    fn default() -> Self {
        Self {
            tolerance: DEFAULT_TOLERANCE,
            retry_limit: DEFAULT_RETRY_LIMIT,
            digest: DigestAlgorithm::Md5,
        }
    }
}

impl GuardConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.tolerance >= 0.0 && self.tolerance.is_finite()) {
            return Err(ConfigError::Tolerance(self.tolerance));
        }
        if self.retry_limit == 0 {
            return Err(ConfigError::RetryLimit);
        }
        Ok(())
    }
}

/// 128-bit state digest.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Digest(pub [u8; 16]);

impl Digest {
    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// State that can be snapshotted and digested.
pub trait Checkpoint: Clone {
    fn write_canonical(&self, out: &mut dyn Write) -> io::Result<()>;
}

impl Checkpoint for State {
    fn write_canonical(&self, out: &mut dyn Write) -> io::Result<()> {
        self.write_dump_to(out)
    }
}

/// Errors from an iteration function that tell the guard whether a
/// rollback can help.
pub trait Recoverable {
    fn is_recoverable(&self) -> bool;
}

impl Recoverable for SolverError {
    fn is_recoverable(&self) -> bool {
        matches!(self, SolverError::Assertion { .. })
    }
}

pub fn digest_bytes(bytes: &[u8]) -> Digest {
    Digest(Md5::digest(bytes).into())
}

/// MD5 of the canonical serialization, streamed into the hasher.
pub fn digest_of<S: Checkpoint>(state: &S) -> Digest {
    let mut hasher = Md5::new();
    state.write_canonical(&mut hasher).expect("hashing sink never fails");
    Digest(hasher.finalize().into())
}

pub fn digest(state: &State) -> Digest {
    digest_of(state)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Mass,
    Momentum,
    Energy,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Mass, Component::Momentum, Component::Energy];
}

/// Shadow copy of the initial conserved totals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantReference {
    pub invariants: Invariants,
}

impl InvariantReference {
    /// Scale used in place of a zero reference component: the smallest
    /// nonzero reference magnitude, or a tiny positive constant if all
    /// components vanish.
    pub fn floor(&self) -> f64 {
        self.invariants
            .components()
            .iter()
            .map(|v| v.abs())
            .filter(|&v| v > 0.0)
            .reduce(f64::min)
            .unwrap_or(ZERO_FLOOR)
            .max(ZERO_FLOOR)
    }
}

/// Totals of the initial state, computed outside any armed context.
pub fn reference_invariants(initial: &State) -> InvariantReference {
    InvariantReference {
        invariants: compute_invariants(&mut Arith::new(), initial),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub component: Component,
    /// Relative drift; NaN when the current total is not a number.
    pub drift: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CheckResult {
    Ok,
    Discrepancy(Discrepancy),
}

impl CheckResult {
    pub fn is_ok(&self) -> bool {
        matches!(self, CheckResult::Ok)
    }
}

/// `|cur - ref| <= tolerance * max(|ref|, floor)` for every component.
pub fn check(current: &Invariants, reference: &InvariantReference, tolerance: f64) -> CheckResult {
    let floor = reference.floor();
    let cur = current.components();
    let refs = reference.invariants.components();
    let mut worst: Option<Discrepancy> = None;
    for (k, component) in Component::ALL.into_iter().enumerate() {
        let scale = refs[k].abs().max(floor);
        let diff = (cur[k] - refs[k]).abs();
        if diff <= tolerance * scale {
            continue;
        }
        let drift = diff / scale;
        let replace = match worst {
            None => true,
            Some(w) => !w.drift.is_nan() && (drift.is_nan() || drift > w.drift),
        };
        if replace {
            worst = Some(Discrepancy { component, drift });
        }
    }
    match worst {
        None => CheckResult::Ok,
        Some(d) => CheckResult::Discrepancy(d),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuardVerdict {
    Committed,
    RolledBack,
    Exhausted,
}

/// What triggered the most recent rollback.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RollbackCause {
    Discrepancy(Discrepancy),
    Assertion,
}

#[derive(Debug, thiserror::Error)]
pub enum GuardError<E> {
    #[error("unrecoverable failure: {0}")]
    Fatal(E),
    #[error("snapshot integrity error: stored digest {stored}, recomputed {actual}")]
    Integrity { stored: Digest, actual: Digest },
    #[error("guarded run has already aborted")]
    Aborted,
}

#[derive(Clone, Debug)]
pub struct Snapshot<S> {
    pub state: S,
    pub iteration: u64,
    pub digest: Digest,
}

#[derive(Debug)]
pub struct GuardedRun<S: Checkpoint> {
    current: S,
    snapshot: Snapshot<S>,
    iteration: u64,
    reference: InvariantReference,
    config: GuardConfig,
    consecutive: u32,
    total_rollbacks: u64,
    last_cause: Option<RollbackCause>,
    aborted: bool,
}

impl<S: Checkpoint> GuardedRun<S> {
    /// The initial state doubles as the first snapshot, so a failure in the
    /// first iteration restarts from it.
    pub fn new(initial: S, reference: InvariantReference, config: GuardConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let digest = digest_of(&initial);
        Ok(Self {
            snapshot: Snapshot {
                state: initial.clone(),
                iteration: 0,
                digest,
            },
            current: initial,
            iteration: 0,
            reference,
            config,
            consecutive: 0,
            total_rollbacks: 0,
            last_cause: None,
            aborted: false,
        })
    }

    pub fn current(&self) -> &S {
        &self.current
    }

    pub fn current_mut(&mut self) -> &mut S {
        &mut self.current
    }

    pub fn into_current(self) -> S {
        self.current
    }

    pub fn snapshot(&self) -> &Snapshot<S> {
        &self.snapshot
    }

    /// Direct access to the stored copy, for experiments on snapshot
    /// integrity.
    pub fn snapshot_state_mut(&mut self) -> &mut S {
        &mut self.snapshot.state
    }

    /// Loop counter: number of committed iterations.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn config(&self) -> &GuardConfig {
        &self.config
    }

    pub fn reference(&self) -> &InvariantReference {
        &self.reference
    }

    pub fn consecutive_rollbacks(&self) -> u32 {
        self.consecutive
    }

    pub fn total_rollbacks(&self) -> u64 {
        self.total_rollbacks
    }

    pub fn last_cause(&self) -> Option<RollbackCause> {
        self.last_cause
    }

    pub fn is_aborted(&self) -> bool {
        self.aborted
    }

    /// Run one iteration under the guard. `body` advances the state in place
    /// and returns its conserved totals.
    pub fn guarded_iteration<E, F>(&mut self, body: F) -> Result<GuardVerdict, GuardError<E>>
    where
        E: Recoverable,
        F: FnOnce(&mut S) -> Result<Invariants, E>,
    {
        if self.aborted {
            return Err(GuardError::Aborted);
        }
        let cause = match body(&mut self.current) {
            Ok(inv) => match check(&inv, &self.reference, self.config.tolerance) {
                CheckResult::Ok => {
                    self.commit();
                    return Ok(GuardVerdict::Committed);
                }
                CheckResult::Discrepancy(d) => RollbackCause::Discrepancy(d),
            },
            Err(e) if e.is_recoverable() => RollbackCause::Assertion,
            Err(e) => {
                self.aborted = true;
                return Err(GuardError::Fatal(e));
            }
        };
        self.last_cause = Some(cause);
        self.rollback()?;
        self.consecutive += 1;
        self.total_rollbacks += 1;
        if self.consecutive >= self.config.retry_limit {
            self.aborted = true;
            Ok(GuardVerdict::Exhausted)
        } else {
            Ok(GuardVerdict::RolledBack)
        }
    }

    /// Overwrite the snapshot with the current state.
    pub fn commit(&mut self) {
        self.iteration += 1;
        self.snapshot.state.clone_from(&self.current);
        self.snapshot.iteration = self.iteration;
        self.snapshot.digest = digest_of(&self.snapshot.state);
        self.consecutive = 0;
    }

    /// Restore the current state and loop counter from the snapshot after
    /// verifying its digest.
    pub fn rollback<E>(&mut self) -> Result<(), GuardError<E>> {
        let actual = digest_of(&self.snapshot.state);
        if actual != self.snapshot.digest {
            self.aborted = true;
            return Err(GuardError::Integrity {
                stored: self.snapshot.digest,
                actual,
            });
        }
        self.current.clone_from(&self.snapshot.state);
        self.iteration = self.snapshot.iteration;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{init_sod, init_uniform, step};

    #[test]
    fn empty_input_digest() {
        assert_eq!(digest_bytes(b"").to_hex(), "d41d8cd98f00b204e9800998ecf8427e");
    }

    #[test]
    fn streamed_digest_matches_whole_buffer() {
        let s = init_sod(300, 1.4).unwrap();
        assert_eq!(digest(&s), digest_bytes(&s.to_dump()));
    }

    #[test]
    fn digest_sensitivity_one_cell() {
        let s = init_sod(4, 1.4).unwrap();
        let base = digest(&s);
        assert_eq!(base, digest(&s));
        for bit in 0..64 {
            let mut t = s.clone();
            t.ene[2] = f64::from_bits(t.ene[2].to_bits() ^ (1 << bit));
            assert_ne!(digest(&t), base, "bit {bit}");
        }
    }

    #[test]
    fn config_validation_and_json() {
        assert!(GuardConfig::default().validate().is_ok());
        let bad = GuardConfig {
            retry_limit: 0,
            ..Default::default()
        };
        assert_eq!(bad.validate(), Err(ConfigError::RetryLimit));
        let bad = GuardConfig {
            tolerance: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let c: GuardConfig = serde_json::from_str(r#"{"tolerance": 1e-9, "retry_limit": 5, "digest": "md5"}"#).unwrap();
        assert_eq!(c.tolerance, 1e-9);
        assert_eq!(c.retry_limit, 5);
        assert!(serde_json::from_str::<GuardConfig>(r#"{"digest": "sha1"}"#).is_err());
        assert!(serde_json::from_str::<GuardConfig>(r#"{"retries": 2}"#).is_err());
        let partial: GuardConfig = serde_json::from_str(r#"{"retry_limit": 2}"#).unwrap();
        assert_eq!(partial.tolerance, DEFAULT_TOLERANCE);
        assert_eq!("MD5".parse::<DigestAlgorithm>(), Ok(DigestAlgorithm::Md5));
    }

    fn reference(mass: f64, momentum: f64, energy: f64) -> InvariantReference {
        InvariantReference {
            invariants: Invariants { mass, momentum, energy },
        }
    }

    #[test]
    fn check_examples() {
        let r = reference(0.5625, 0.0, 1.375);
        assert!(check(&r.invariants, &r, 1e-12).is_ok());
        assert!(check(&r.invariants, &r, 0.0).is_ok());

        let mut cur = r.invariants;
        cur.energy += 2.0 * 1e-12 * 1.375;
        match check(&cur, &r, 1e-12) {
            CheckResult::Discrepancy(d) => {
                assert_eq!(d.component, Component::Energy);
                assert!((d.drift - 2e-12).abs() < 1e-14);
            }
            CheckResult::Ok => panic!("missed energy drift"),
        }

        let mut cur = r.invariants;
        cur.momentum = 1e-16;
        assert!(check(&cur, &r, 1e-12).is_ok());
        cur.momentum = 1e-9;
        assert!(matches!(
            check(&cur, &r, 1e-12),
            CheckResult::Discrepancy(Discrepancy {
                component: Component::Momentum,
                ..
            })
        ));
    }

    #[test]
    fn nan_is_always_a_discrepancy() {
        let r = reference(1.0, 0.0, 2.5);
        let mut cur = r.invariants;
        cur.mass = f64::NAN;
        match check(&cur, &r, f64::MAX) {
            CheckResult::Discrepancy(d) => {
                assert_eq!(d.component, Component::Mass);
                assert!(d.drift.is_nan());
            }
            CheckResult::Ok => panic!("NaN accepted"),
        }
    }

    #[test]
    fn all_zero_reference_uses_tiny_floor() {
        let r = reference(0.0, 0.0, 0.0);
        assert_eq!(r.floor(), 1e-300);
        let cur = Invariants {
            mass: 1e-200,
            momentum: 0.0,
            energy: 0.0,
        };
        assert!(!check(&cur, &r, 1e-12).is_ok());
    }

    #[test]
    fn reference_values() {
        let u = init_uniform(100, 1.0, 0.0, 1.0, 1.4).unwrap();
        assert_eq!(reference_invariants(&u).invariants.mass, 1.0);
        let s = init_sod(200, 1.4).unwrap();
        assert_eq!(reference_invariants(&s).invariants.momentum, 0.0);
    }

    fn sod_run(limit: u32) -> GuardedRun<State> {
        let s = init_sod(40, 1.4).unwrap();
        let r = reference_invariants(&s);
        GuardedRun::new(
            s,
            r,
            GuardConfig {
                retry_limit: limit,
                ..Default::default()
            },
        )
        .unwrap()
    }

    fn advance(ctx: &mut Arith, s: &mut State) -> Result<Invariants, SolverError> {
        let (next, _) = step(ctx, s, 0.5)?;
        *s = next;
        Ok(compute_invariants(ctx, s))
    }

    #[test]
    fn fault_free_iterations_commit() {
        let mut run = sod_run(3);
        let mut ctx = Arith::new();
        for k in 1..=5 {
            let v = run.guarded_iteration(|s| advance(&mut ctx, s)).unwrap();
            assert_eq!(v, GuardVerdict::Committed);
            assert_eq!(run.iteration(), k);
            assert_eq!(run.snapshot().iteration, k);
            assert_eq!(run.snapshot().state, *run.current());
            assert_eq!(run.snapshot().digest, digest(run.current()));
        }
        assert_eq!(run.total_rollbacks(), 0);
    }

    #[test]
    fn commit_then_rollback_round_trip() {
        let mut run = sod_run(3);
        let mut ctx = Arith::new();
        run.guarded_iteration(|s| advance(&mut ctx, s)).unwrap();
        let committed = run.current().clone();
        run.current_mut().rho[3] = 7.0;
        run.current_mut().time = 99.0;
        run.rollback::<SolverError>().unwrap();
        assert_eq!(*run.current(), committed);
        assert_eq!(run.current().time, committed.time);
    }

    #[test]
    fn snapshot_keeps_only_newest_commit() {
        let mut run = sod_run(3);
        let mut ctx = Arith::new();
        run.guarded_iteration(|s| advance(&mut ctx, s)).unwrap();
        let first = run.current().clone();
        run.guarded_iteration(|s| advance(&mut ctx, s)).unwrap();
        assert_ne!(run.snapshot().state, first);
        assert_eq!(run.snapshot().state, *run.current());
        assert_eq!(run.snapshot().iteration, 2);
    }

    #[test]
    fn discrepancy_rolls_back_then_exhausts() {
        let mut run = sod_run(3);
        let mut ctx = Arith::new();
        run.guarded_iteration(|s| advance(&mut ctx, s)).unwrap();
        let committed = run.current().clone();
        let corrupt = |ctx: &mut Arith, s: &mut State| {
            let inv = advance(ctx, s)?;
            s.rho[0] += 1.0;
            Ok::<_, SolverError>(Invariants {
                mass: inv.mass + 1.0,
                ..inv
            })
        };
        assert_eq!(
            run.guarded_iteration(|s| corrupt(&mut ctx, s)).unwrap(),
            GuardVerdict::RolledBack
        );
        assert_eq!(*run.current(), committed);
        assert_eq!(run.iteration(), 1);
        assert_eq!(
            run.guarded_iteration(|s| corrupt(&mut ctx, s)).unwrap(),
            GuardVerdict::RolledBack
        );
        assert_eq!(
            run.guarded_iteration(|s| corrupt(&mut ctx, s)).unwrap(),
            GuardVerdict::Exhausted
        );
        assert_eq!(run.total_rollbacks(), 3);
        assert!(matches!(run.last_cause(), Some(RollbackCause::Discrepancy(d)) if d.component == Component::Mass));
        assert!(matches!(
            run.guarded_iteration(|s| advance(&mut ctx, s)),
            Err(GuardError::Aborted)
        ));
    }

    #[test]
    fn success_resets_consecutive_count() {
        let mut run = sod_run(2);
        let mut ctx = Arith::new();
        let fail = |_: &mut State| -> Result<Invariants, SolverError> {
            Err(SolverError::Assertion {
                kind: crate::solver::AssertionKind::NonPositiveDensity,
                cell: 0,
            })
        };
        assert_eq!(run.guarded_iteration(fail).unwrap(), GuardVerdict::RolledBack);
        assert_eq!(run.last_cause(), Some(RollbackCause::Assertion));
        assert_eq!(
            run.guarded_iteration(|s| advance(&mut ctx, s)).unwrap(),
            GuardVerdict::Committed
        );
        assert_eq!(run.consecutive_rollbacks(), 0);
        assert_eq!(run.guarded_iteration(fail).unwrap(), GuardVerdict::RolledBack);
        assert_eq!(run.guarded_iteration(fail).unwrap(), GuardVerdict::Exhausted);
        assert_eq!(run.total_rollbacks(), 3);
    }

    #[test]
    fn first_iteration_failure_restarts_from_initial() {
        let mut run = sod_run(3);
        let initial = run.current().clone();
        let v = run
            .guarded_iteration(|s| {
                s.rho[5] = -1.0;
                Err::<Invariants, _>(SolverError::Assertion {
                    kind: crate::solver::AssertionKind::NonPositiveDensity,
                    cell: 5,
                })
            })
            .unwrap();
        assert_eq!(v, GuardVerdict::RolledBack);
        assert_eq!(*run.current(), initial);
        assert_eq!(run.iteration(), 0);
    }

    #[test]
    fn crash_is_fatal() {
        let mut run = sod_run(3);
        let r = run.guarded_iteration(|_| {
            Err::<Invariants, _>(SolverError::Crash(crate::arith::AccessViolation {
                index: 1 << 20,
                len: 40,
            }))
        });
        assert!(matches!(r, Err(GuardError::Fatal(SolverError::Crash(_)))));
        assert!(run.is_aborted());
    }

    #[test]
    fn corrupted_snapshot_is_an_integrity_error() {
        let mut run = sod_run(3);
        let mut ctx = Arith::new();
        run.guarded_iteration(|s| advance(&mut ctx, s)).unwrap();
        run.snapshot_state_mut().mom[1] = f64::from_bits(run.snapshot().state.mom[1].to_bits() ^ 1);
        let r = run.guarded_iteration(|_| {
            Err::<Invariants, _>(SolverError::Assertion {
                kind: crate::solver::AssertionKind::NonFinite,
                cell: 0,
            })
        });
        assert!(matches!(r, Err(GuardError::Integrity { .. })));
        assert!(run.is_aborted());
    }
}
