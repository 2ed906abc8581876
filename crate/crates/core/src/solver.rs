//! First-order finite-volume solver for the 1-D compressible Euler equations
//! on a uniform periodic unit domain, with a Rusanov (local Lax-Friedrichs)
//! flux.
//!
//! All loop arithmetic goes through [`Arith`]. Each cell evaluates both of
//! its face fluxes itself (a gather stencil), so in a fault-free run the
//! shared face flux is computed twice with identical operands and the update
//! telescopes exactly, while a corrupted operation perturbs a single cell.

use serde::{Deserialize, Serialize};

use crate::arith::{check_index, AccessViolation, Arith, Region};

pub const DEFAULT_GAMMA: f64 = 1.4;
pub const DEFAULT_CFL: f64 = 0.5;

/// Magic prefix of a state dump.
pub const DUMP_MAGIC: &[u8; 8] = b"RHSTATE1";
pub const DUMP_HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssertionKind {
    NonPositiveDensity,
    NonPositivePressure,
    NonFinite,
    InvalidTimeStep,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SolverError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("assertion failure: {kind:?} at cell {cell}")]
    Assertion { kind: AssertionKind, cell: usize },
    #[error("crash: {0}")]
    Crash(#[from] AccessViolation),
}

impl SolverError {
    fn assertion(kind: AssertionKind, cell: usize) -> Self {
        SolverError::Assertion { kind, cell }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DumpError {
    #[error("state dump shorter than its header")]
    Truncated,
    #[error("bad state dump magic")]
    BadMagic,
    #[error("state dump of {actual} bytes does not hold {n_cells} cells")]
    LengthMismatch { n_cells: u64, actual: usize },
}

/// Conserved variables of one cell (or a flux of them).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Conserved {
    pub rho: f64,
    pub mom: f64,
    pub ene: f64,
}

impl Conserved {
    pub fn new(rho: f64, mom: f64, ene: f64) -> Self {
        Self { rho, mom, ene }
    }

    /// Conserved image of a primitive `(rho, u, p)` triple.
    pub fn from_primitive(rho: f64, u: f64, p: f64, gamma: f64) -> Self {
        Self {
            rho,
            mom: rho * u,
            ene: p / (gamma - 1.0) + 0.5 * rho * u * u,
        }
    }

    /// Pressure in plain arithmetic (diagnostics and fixtures).
    pub fn pressure(&self, gamma: f64) -> f64 {
        (gamma - 1.0) * (self.ene - 0.5 * self.mom * (self.mom / self.rho))
    }
}

/// Cell-centred conserved fields.
#[derive(Debug, PartialEq)]
pub struct State {
    pub dx: f64,
    pub rho: Vec<f64>,
    pub mom: Vec<f64>,
    pub ene: Vec<f64>,
    pub gamma: f64,
    pub time: f64,
    pub iteration: u64,
}

impl Clone for State {
    fn clone(&self) -> Self {
        Self {
            dx: self.dx,
            rho: self.rho.clone(),
            mom: self.mom.clone(),
            ene: self.ene.clone(),
            gamma: self.gamma,
            time: self.time,
            iteration: self.iteration,
        }
    }

    fn clone_from(&mut self, source: &Self) {
        self.dx = source.dx;
        self.rho.clone_from(&source.rho);
        self.mom.clone_from(&source.mom);
        self.ene.clone_from(&source.ene);
        self.gamma = source.gamma;
        self.time = source.time;
        self.iteration = source.iteration;
    }
}

impl State {
    pub fn n_cells(&self) -> usize {
        self.rho.len()
    }

    pub fn cell(&self, i: usize) -> Conserved {
        Conserved::new(self.rho[i], self.mom[i], self.ene[i])
    }

    pub fn pressure(&self, i: usize) -> f64 {
        self.cell(i).pressure(self.gamma)
    }

    /// Positivity and finiteness of every cell.
    pub fn is_physical(&self) -> bool {
        (0..self.n_cells()).all(|i| {
            let w = self.cell(i);
            w.rho.is_finite() && w.mom.is_finite() && w.ene.is_finite() && w.rho > 0.0 && {
                let p = w.pressure(self.gamma);
                p > 0.0 && p.is_finite()
            }
        })
    }

    /// Canonical dump: `RHSTATE1`, n_cells as u64 LE, then the rho, mom and
    /// ene arrays as binary64 LE.
    pub fn write_dump_to(&self, out: &mut dyn std::io::Write) -> std::io::Result<()> {
        out.write_all(DUMP_MAGIC)?;
        out.write_all(&(self.n_cells() as u64).to_le_bytes())?;
        let mut chunk = [0u8; 4096];
        for field in [&self.rho, &self.mom, &self.ene] {
            for values in field.chunks(chunk.len() / 8) {
                for (dst, v) in chunk.chunks_exact_mut(8).zip(values) {
                    dst.copy_from_slice(&v.to_le_bytes());
                }
                out.write_all(&chunk[..8 * values.len()])?;
            }
        }
        Ok(())
    }

    pub fn to_dump(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(DUMP_HEADER_LEN + 24 * self.n_cells());
        self.write_dump_to(&mut out).expect("writing to memory");
        out
    }
}

/// Field arrays recovered from a dump.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldDump {
    pub rho: Vec<f64>,
    pub mom: Vec<f64>,
    pub ene: Vec<f64>,
}

impl FieldDump {
    pub fn parse(bytes: &[u8]) -> Result<Self, DumpError> {
        if bytes.len() < DUMP_HEADER_LEN {
            return Err(DumpError::Truncated);
        }
        if &bytes[..8] != DUMP_MAGIC {
            return Err(DumpError::BadMagic);
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let body = &bytes[DUMP_HEADER_LEN..];
        if n.checked_mul(24) != Some(body.len() as u64) {
            return Err(DumpError::LengthMismatch {
                n_cells: n,
                actual: bytes.len(),
            });
        }
        let n = n as usize;
        let read = |k: usize| -> Vec<f64> {
            body[k * 8 * n..(k + 1) * 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        Ok(Self {
            rho: read(0),
            mom: read(1),
            ene: read(2),
        })
    }
}

impl From<&State> for FieldDump {
    fn from(s: &State) -> Self {
        Self {
            rho: s.rho.clone(),
            mom: s.mom.clone(),
            ene: s.ene.clone(),
        }
    }
}

/// The three conserved totals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Invariants {
    pub mass: f64,
    pub momentum: f64,
    pub energy: f64,
}

impl Invariants {
    pub const NAMES: [&'static str; 3] = ["mass", "momentum", "energy"];

    pub fn components(&self) -> [f64; 3] {
        [self.mass, self.momentum, self.energy]
    }
}

fn validate_gas(n_cells: usize, gamma: f64) -> Result<(), SolverError> {
    if n_cells < 2 {
        return Err(SolverError::Config(format!("need at least 2 cells, got {n_cells}")));
    }
    if !(gamma > 1.0 && gamma.is_finite()) {
        return Err(SolverError::Config(format!("gamma must exceed 1, got {gamma}")));
    }
    Ok(())
}

/// Uniform state of `n_cells` cells holding `(rho0, u0, p0)`.
pub fn init_uniform(n_cells: usize, rho0: f64, u0: f64, p0: f64, gamma: f64) -> Result<State, SolverError> {
    validate_gas(n_cells, gamma)?;
    if !(rho0 > 0.0 && p0 > 0.0 && rho0.is_finite() && p0.is_finite() && u0.is_finite()) {
        return Err(SolverError::Config(format!(
            "need positive finite density and pressure, got rho={rho0}, p={p0}"
        )));
    }
    let w = Conserved::from_primitive(rho0, u0, p0, gamma);
    Ok(State {
        dx: 1.0 / n_cells as f64,
        rho: vec![w.rho; n_cells],
        mom: vec![w.mom; n_cells],
        ene: vec![w.ene; n_cells],
        gamma,
        time: 0.0,
        iteration: 0,
    })
}

/// Shock tube: `(1, 0, 1)` on the left half, `(0.125, 0, 0.1)` on the right.
pub fn init_sod(n_cells: usize, gamma: f64) -> Result<State, SolverError> {
    validate_gas(n_cells, gamma)?;
    if !n_cells.is_multiple_of(2) {
        return Err(SolverError::Config(format!(
            "shock tube needs an even cell count, got {n_cells}"
        )));
    }
    let left = Conserved::from_primitive(1.0, 0.0, 1.0, gamma);
    let right = Conserved::from_primitive(0.125, 0.0, 0.1, gamma);
    let half = n_cells / 2;
    let pick = |i: usize| if i < half { left } else { right };
    Ok(State {
        dx: 1.0 / n_cells as f64,
        rho: (0..n_cells).map(|i| pick(i).rho).collect(),
        mom: (0..n_cells).map(|i| pick(i).mom).collect(),
        ene: (0..n_cells).map(|i| pick(i).ene).collect(),
        gamma,
        time: 0.0,
        iteration: 0,
    })
}

#[derive(Clone, Copy)]
struct Gas {
    gamma: f64,
    gm1: f64,
}

impl Gas {
    fn new(gamma: f64) -> Self {
        Self {
            gamma,
            gm1: gamma - 1.0,
        }
    }
}

#[derive(Clone, Copy)]
struct Primitive {
    u: f64,
    p: f64,
    speed: f64,
}

#[inline]
fn primitive(ctx: &mut Arith, w: Conserved, gas: Gas, cell: usize) -> Result<Primitive, SolverError> {
    if !(w.rho > 0.0) {
        return Err(SolverError::assertion(AssertionKind::NonPositiveDensity, cell));
    }
    let u = ctx.div(w.mom, w.rho);
    let half_mom = ctx.fmul(0.5, w.mom);
    let kinetic = ctx.fmul(half_mom, u);
    let internal = ctx.fsub(w.ene, kinetic);
    let p = ctx.fmul(gas.gm1, internal);
    if !(p > 0.0) {
        return Err(SolverError::assertion(AssertionKind::NonPositivePressure, cell));
    }
    let gp = ctx.fmul(gas.gamma, p);
    let c2 = ctx.div(gp, w.rho);
    let c = ctx.sqrt(c2);
    let speed = ctx.fadd(u.abs(), c);
    Ok(Primitive { u, p, speed })
}

#[inline]
fn physical_flux(ctx: &mut Arith, w: Conserved, prim: Primitive) -> Conserved {
    let mu = ctx.fmul(w.mom, prim.u);
    let ep = ctx.fadd(w.ene, prim.p);
    Conserved {
        rho: w.mom,
        mom: ctx.fadd(mu, prim.p),
        ene: ctx.fmul(ep, prim.u),
    }
}

#[inline]
fn rusanov_component(ctx: &mut Arith, fl: f64, fr: f64, wl: f64, wr: f64, half_speed: f64) -> f64 {
    let sum = ctx.fadd(fl, fr);
    let central = ctx.fmul(0.5, sum);
    let jump = ctx.fsub(wr, wl);
    let dissipation = ctx.fmul(half_speed, jump);
    ctx.fsub(central, dissipation)
}

/// Rusanov flux from precomputed primitives and physical fluxes; also
/// returns the face's maximum signal speed.
#[inline]
fn rusanov(
    ctx: &mut Arith,
    (wl, pl, fl): (Conserved, Primitive, Conserved),
    (wr, pr, fr): (Conserved, Primitive, Conserved),
) -> (Conserved, f64) {
    let speed = if ctx.cmp(pl.speed, pr.speed) == std::cmp::Ordering::Greater {
        pl.speed
    } else {
        pr.speed
    };
    let hs = ctx.fmul(0.5, speed);
    let flux = Conserved {
        rho: rusanov_component(ctx, fl.rho, fr.rho, wl.rho, wr.rho, hs),
        mom: rusanov_component(ctx, fl.mom, fr.mom, wl.mom, wr.mom, hs),
        ene: rusanov_component(ctx, fl.ene, fr.ene, wl.ene, wr.ene, hs),
    };
    (flux, speed)
}

/// Rusanov flux `½(F(L)+F(R)) − ½ s_max (R−L)` with
/// `s_max = max(|u|+c)` over the two states.
pub fn numerical_flux(
    ctx: &mut Arith,
    left: Conserved,
    right: Conserved,
    gamma: f64,
) -> Result<Conserved, SolverError> {
    let gas = Gas::new(gamma);
    let pl = primitive(ctx, left, gas, 0)?;
    let pr = primitive(ctx, right, gas, 1)?;
    let fl = physical_flux(ctx, left, pl);
    let fr = physical_flux(ctx, right, pr);
    Ok(rusanov(ctx, (left, pl, fl), (right, pr, fr)).0)
}

/// Cell read from the interleaved scratch array. The cell index passes the
/// addressing-corruption check and is scaled by `imul`; both are bounds
/// checked.
#[inline]
fn load(ctx: &mut Arith, packed: &[f64], cell: usize, n: usize) -> Result<Conserved, SolverError> {
    let cell = ctx.corrupt_index(cell, n)?;
    let base = ctx.imul(cell as i64, 3);
    let base = check_index(base, packed.len() - 2)?;
    Ok(Conserved::new(packed[base], packed[base + 1], packed[base + 2]))
}

#[inline]
fn check_updated(ctx: &mut Arith, w: Conserved, gas: Gas, cell: usize) -> Result<(), SolverError> {
    if !(w.rho.is_finite() && w.mom.is_finite() && w.ene.is_finite()) {
        return Err(SolverError::assertion(AssertionKind::NonFinite, cell));
    }
    if !(w.rho > 0.0) {
        return Err(SolverError::assertion(AssertionKind::NonPositiveDensity, cell));
    }
    let u = ctx.div(w.mom, w.rho);
    let half_mom = ctx.fmul(0.5, w.mom);
    let kinetic = ctx.fmul(half_mom, u);
    let internal = ctx.fsub(w.ene, kinetic);
    let p = ctx.fmul(gas.gm1, internal);
    if !(p > 0.0) {
        return Err(SolverError::assertion(AssertionKind::NonPositivePressure, cell));
    }
    Ok(())
}

/// One explicit conservative update with `dt = cfl·dx / max wave speed`.
pub fn step(ctx: &mut Arith, state: &State, cfl: f64) -> Result<(State, f64), SolverError> {
    step_capped(ctx, state, cfl, f64::INFINITY)
}

/// As [`step`], with the time increment clamped to `max_dt`.
pub fn step_capped(ctx: &mut Arith, state: &State, cfl: f64, max_dt: f64) -> Result<(State, f64), SolverError> {
    if !(cfl > 0.0 && cfl <= 1.0) {
        return Err(SolverError::Config(format!("cfl must lie in (0, 1], got {cfl}")));
    }
    let n = state.n_cells();
    let gas = Gas::new(state.gamma);
    let dx = state.dx;

    let mut packed = Vec::with_capacity(3 * n);
    for i in 0..n {
        packed.extend_from_slice(&[state.rho[i], state.mom[i], state.ene[i]]);
    }

    // Net flux F(i+1/2) - F(i-1/2) of every cell, and the global signal speed.
    let mut net = Vec::with_capacity(n);
    let mut max_speed = 0.0;
    for i in 0..n {
        ctx.set_region(Region::Flux);
        let west = if i == 0 { n - 1 } else { i - 1 };
        let east = if i + 1 == n { 0 } else { i + 1 };
        let ww = load(ctx, &packed, west, n)?;
        let wc = load(ctx, &packed, i, n)?;
        let we = load(ctx, &packed, east, n)?;
        let pw = primitive(ctx, ww, gas, west)?;
        let pc = primitive(ctx, wc, gas, i)?;
        let pe = primitive(ctx, we, gas, east)?;
        let fw = physical_flux(ctx, ww, pw);
        let fc = physical_flux(ctx, wc, pc);
        let fe = physical_flux(ctx, we, pe);
        let (flux_w, speed_w) = rusanov(ctx, (ww, pw, fw), (wc, pc, fc));
        let (flux_e, speed_e) = rusanov(ctx, (wc, pc, fc), (we, pe, fe));
        net.push(Conserved {
            rho: ctx.fsub(flux_e.rho, flux_w.rho),
            mom: ctx.fsub(flux_e.mom, flux_w.mom),
            ene: ctx.fsub(flux_e.ene, flux_w.ene),
        });
        ctx.set_region(Region::Timestep);
        for s in [speed_w, speed_e] {
            if ctx.cmp(s, max_speed) == std::cmp::Ordering::Greater {
                max_speed = s;
            }
        }
    }

    ctx.set_region(Region::Timestep);
    let reach = ctx.fmul(cfl, dx);
    let mut dt = ctx.div(reach, max_speed);
    if dt > max_dt {
        dt = max_dt;
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(SolverError::assertion(AssertionKind::InvalidTimeStep, 0));
    }
    let lambda = ctx.div(dt, dx);
    let time = ctx.fadd(state.time, dt);

    ctx.set_region(Region::Update);
    let mut next = State {
        dx,
        rho: Vec::with_capacity(n),
        mom: Vec::with_capacity(n),
        ene: Vec::with_capacity(n),
        gamma: state.gamma,
        time,
        iteration: state.iteration + 1,
    };
    for (i, d) in net.iter().enumerate() {
        let dr = ctx.fmul(lambda, d.rho);
        let dm = ctx.fmul(lambda, d.mom);
        let de = ctx.fmul(lambda, d.ene);
        let w = Conserved {
            rho: ctx.fsub(state.rho[i], dr),
            mom: ctx.fsub(state.mom[i], dm),
            ene: ctx.fsub(state.ene[i], de),
        };
        check_updated(ctx, w, gas, i)?;
        next.rho.push(w.rho);
        next.mom.push(w.mom);
        next.ene.push(w.ene);
    }
    Ok((next, dt))
}

/// Advance until `t_end` (last step clamped); returns the number of steps.
pub fn run_to_time(ctx: &mut Arith, state: &mut State, cfl: f64, t_end: f64) -> Result<u64, SolverError> {
    let mut steps = 0;
    while state.time < t_end {
        let (next, _) = step_capped(ctx, state, cfl, t_end - state.time)?;
        *state = next;
        steps += 1;
    }
    Ok(steps)
}

/// Fixed-order totals: fields are summed left to right, then scaled by `dx`.
pub fn compute_invariants(ctx: &mut Arith, state: &State) -> Invariants {
    ctx.set_region(Region::Invariants);
    let (mut mass, mut momentum, mut energy) = (0.0, 0.0, 0.0);
    for i in 0..state.n_cells() {
        mass = ctx.fadd(mass, state.rho[i]);
        momentum = ctx.fadd(momentum, state.mom[i]);
        energy = ctx.fadd(energy, state.ene[i]);
    }
    Invariants {
        mass: ctx.fmul(mass, state.dx),
        momentum: ctx.fmul(momentum, state.dx),
        energy: ctx.fmul(energy, state.dx),
    }
}

/// Diagnostic sampler: a xorshift64 scratch generator that picks one cell per
/// iteration for the run log. It never feeds back into the fields.
#[derive(Clone, Debug)]
pub struct Probe {
    state: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSample {
    pub cell: usize,
    pub rho: f64,
}

impl Probe {
    pub fn new(seed: u64) -> Self {
        Self {
            state: if seed == 0 { 0x2545_F491_4F6C_DD1D } else { seed },
        }
    }

    pub fn sample(&mut self, ctx: &mut Arith, state: &State) -> ProbeSample {
        ctx.set_region(Region::Probe);
        let mut x = self.state;
        x = ctx.xor(x, x << 13);
        x = ctx.xor(x, x >> 7);
        x = ctx.xor(x, x << 17);
        self.state = x;
        let cell = (x % state.n_cells() as u64) as usize;
        ProbeSample {
            cell,
            rho: state.rho[cell],
        }
    }
}
