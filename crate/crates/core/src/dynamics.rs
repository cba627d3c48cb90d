//! The mean-field point-vortex system `ẋᵢ = (1/N) Σ_{j≠i} ∇⊥g(xᵢ - xⱼ)`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{Point2, TWO_PI};

/// Pairs closer than this are treated as collided.
pub const COLLISION_DISTANCE: f64 = 1e-12;
/// Adaptive steps below this size abort the integration.
pub const MIN_STEP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VortexState {
    pub positions: Vec<Point2>,
    pub t: f64,
}

impl VortexState {
    /// Checks finiteness and pairwise distinctness.
    pub fn new(positions: Vec<Point2>, t: f64) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Parameter("a vortex state needs at least one vortex".into()));
        }
        if positions.iter().any(|p| !p.is_finite()) || !t.is_finite() {
            return Err(Error::Parameter("non-finite vortex position or time".into()));
        }
        let d = min_pair_distance(&positions);
        if d < COLLISION_DISTANCE {
            return Err(Error::Collision(d));
        }
        Ok(VortexState { positions, t })
    }

    pub fn n(&self) -> usize {
        self.positions.len()
    }
}

/// Smallest pairwise distance; `+∞` for a single vortex.
pub fn min_pair_distance(positions: &[Point2]) -> f64 {
    let mut best = f64::INFINITY;
    for (i, p) in positions.iter().enumerate() {
        for q in &positions[i + 1..] {
            best = best.min((*p - *q).norm2());
        }
    }
    best.sqrt()
}

#[derive(Clone, Copy, Default)]
struct Kahan {
    sum: f64,
    c: f64,
}

impl Kahan {
    #[inline]
    fn add(&mut self, v: f64) {
        let y = v - self.c;
        let t = self.sum + y;
        self.c = (t - self.sum) - y;
        self.sum = t;
    }
}

/// Velocities of all vortices. Each pair is visited once in fixed index
/// order and both partial sums are compensated, so results are bit-for-bit
/// reproducible.
pub fn velocities(positions: &[Point2]) -> Result<Vec<Point2>> {
    let n = positions.len();
    let scale = 1.0 / (TWO_PI * n as f64);
    let xs: Vec<f64> = positions.iter().map(|p| p.x1).collect();
    let ys: Vec<f64> = positions.iter().map(|p| p.x2).collect();
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    let min2 = COLLISION_DISTANCE * COLLISION_DISTANCE;
    for i in 0..n {
        let (xi, yi) = (xs[i], ys[i]);
        let (mut ui, mut vi) = (0.0, 0.0);
        let (uj, vj) = (&mut u[i + 1..], &mut v[i + 1..]);
        for (k, (x, y)) in xs[i + 1..].iter().zip(&ys[i + 1..]).enumerate() {
            let dx = xi - x;
            let dy = yi - y;
            let r2 = dx * dx + dy * dy;
            if r2 < min2 {
                return Err(Error::Collision(r2.sqrt()));
            }
            let s = scale / r2;
            // ∇⊥g(x) = (x2, -x1) / (2π|x|²), antisymmetric in the pair.
            ui += dy * s;
            vi -= dx * s;
            uj[k] -= dy * s;
            vj[k] += dx * s;
        }
        u[i] += ui;
        v[i] += vi;
    }
    Ok(u.into_iter().zip(v).map(|(a, b)| Point2::new(a, b)).collect())
}

/// Velocity of vortex `i` (zero-based).
pub fn velocity_at(state: &VortexState, i: usize) -> Result<Point2> {
    let n = state.n();
    if i >= n {
        return Err(Error::Parameter(format!("vortex index {i} out of range for N = {n}")));
    }
    let xi = state.positions[i];
    let mut acc = (Kahan::default(), Kahan::default());
    for (j, xj) in state.positions.iter().enumerate() {
        if j == i {
            continue;
        }
        let d = xi - *xj;
        let r2 = d.norm2();
        if r2 < COLLISION_DISTANCE * COLLISION_DISTANCE {
            return Err(Error::Collision(r2.sqrt()));
        }
        acc.0.add(d.x2 / r2);
        acc.1.add(-d.x1 / r2);
    }
    let s = 1.0 / (TWO_PI * n as f64);
    Ok(Point2::new(acc.0.sum * s, acc.1.sum * s))
}

/// `H_N = (1/2N²) Σ_{i≠j} g(xᵢ - xⱼ)`.
pub fn hamiltonian(state: &VortexState) -> Result<f64> {
    let n = state.n();
    let mut acc = Kahan::default();
    for (i, p) in state.positions.iter().enumerate() {
        for q in &state.positions[i + 1..] {
            let r2 = (*p - *q).norm2();
            if r2 < COLLISION_DISTANCE * COLLISION_DISTANCE {
                return Err(Error::Collision(r2.sqrt()));
            }
            acc.add(r2.ln());
        }
    }
    // Each unordered pair once: Σ_{i<j} -ln r / 2π = -Σ ln r² / 4π, and the
    // ordered sum doubles it.
    Ok(-acc.sum / (4.0 * std::f64::consts::PI) / (n * n) as f64)
}

/// Center of vorticity `M = (1/N) Σ xᵢ` and moment of inertia
/// `I = (1/N) Σ |xᵢ|²`.
pub fn center_and_inertia(state: &VortexState) -> (Point2, f64) {
    let n = state.n() as f64;
    let mut c = (Kahan::default(), Kahan::default());
    let mut i = Kahan::default();
    for p in &state.positions {
        c.0.add(p.x1);
        c.1.add(p.x2);
        i.add(p.norm2());
    }
    (Point2::new(c.0.sum / n, c.1.sum / n), i.sum / n)
}

/// Natural log of the time-independent lower bound on pairwise distances.
///
/// Energy conservation pins `Σ_{i≠j} g(xᵢ - xⱼ) = 2N²H`. Pairs at distance
/// below 1 contribute positively; pairs above 1 contribute at least
/// `-ln√(2N·I)/2π` each because `|xᵢ - xⱼ|² ≤ 2(|xᵢ|² + |xⱼ|²) ≤ 2N·I`.
/// Solving for the closest pair gives
/// `ln d_min ≥ -2πN²H - C(N,2) · max(0, ln√(2N·I))`, capped at 0.
pub fn ln_min_distance_floor(state0: &VortexState) -> Result<f64> {
    let n = state0.n() as f64;
    if state0.n() < 2 {
        return Ok(0.0);
    }
    let h = hamiltonian(state0)?;
    let (_, inertia) = center_and_inertia(state0);
    let far = (2.0 * n * inertia).sqrt().ln().max(0.0);
    let pairs = n * (n - 1.0) / 2.0;
    Ok((-TWO_PI * n * n * h - pairs * far).min(0.0))
}

/// `min{1, exp(-2πN²H - C(N,2)·max(0, ln√(2N·I)))}`. May underflow to zero
/// for large N; use `ln_min_distance_floor` for comparisons.
pub fn min_distance_floor(state0: &VortexState) -> Result<f64> {
    Ok(ln_min_distance_floor(state0)?.exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Method {
    /// Classical fixed-step RK4.
    Rk4 { dt: f64 },
    /// Dormand-Prince 5(4) with mixed absolute/relative tolerance `tol`.
    Rk45 { tol: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorSpec {
    pub method: Method,
    pub t_end: f64,
}

impl IntegratorSpec {
    pub fn validate(&self) -> Result<()> {
        match self.method {
            Method::Rk4 { dt } if !(dt > 0.0) => Err(Error::Parameter(format!("rk4 step must be positive, got {dt}"))),
            Method::Rk45 { tol } if !(tol > 0.0) => Err(Error::Parameter(format!("tolerance must be positive, got {tol}"))),
            _ if !self.t_end.is_finite() => Err(Error::Parameter("t_end must be finite".into())),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IntegratorStats {
    pub accepted: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
    /// Steps where `dt · max|v| ≥ min distance / 10`.
    pub sanity_violations: usize,
    pub smallest_dt: f64,
}

const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

fn axpy(base: &[Point2], terms: &[(&[Point2], f64)], h: f64) -> Vec<Point2> {
    let mut out = base.to_vec();
    for (k, c) in terms {
        if *c == 0.0 {
            continue;
        }
        let s = c * h;
        for (o, v) in out.iter_mut().zip(k.iter()) {
            *o += *v * s;
        }
    }
    out
}

/// Stateful integrator carrying the adaptive step and the first-same-as-last
/// stage between calls.
pub struct Integrator {
    method: Method,
    dt: Option<f64>,
    fsal: Option<(f64, Vec<Point2>)>,
    pub stats: IntegratorStats,
}

impl Integrator {
    pub fn new(method: Method) -> Self {
        Integrator { method, dt: None, fsal: None, stats: IntegratorStats { smallest_dt: f64::INFINITY, ..Default::default() } }
    }

    fn rhs(&mut self, x: &[Point2]) -> Result<Vec<Point2>> {
        self.stats.rhs_evals += 1;
        velocities(x)
    }

    fn monitor(&mut self, x: &[Point2], v: &[Point2], dt: f64) {
        let vmax = v.iter().map(|p| p.norm()).fold(0.0, f64::max);
        if dt.abs() * vmax >= min_pair_distance(x) / 10.0 {
            self.stats.sanity_violations += 1;
        }
        self.stats.smallest_dt = self.stats.smallest_dt.min(dt.abs());
    }

    /// Advances `state` to time `t_target` (which may lie in the past).
    pub fn advance(&mut self, state: &mut VortexState, t_target: f64) -> Result<()> {
        let dir = if t_target >= state.t { 1.0 } else { -1.0 };
        let close = |t: f64| (t_target - t).abs() <= 1e-14 * (1.0 + t_target.abs());
        while !close(state.t) {
            let remaining = t_target - state.t;
            match self.method {
                Method::Rk4 { dt } => {
                    let h = if dt >= remaining.abs() { remaining } else { dir * dt };
                    self.rk4(state, h)?;
                    if h == remaining {
                        state.t = t_target;
                    }
                }
                Method::Rk45 { tol } => {
                    self.dopri(state, t_target, dir, tol)?;
                }
            }
        }
        state.t = t_target;
        Ok(())
    }

    fn rk4(&mut self, state: &mut VortexState, h: f64) -> Result<()> {
        let x = &state.positions;
        let k1 = self.rhs(x)?;
        let k2 = self.rhs(&axpy(x, &[(&k1, 0.5)], h))?;
        let k3 = self.rhs(&axpy(x, &[(&k2, 0.5)], h))?;
        let k4 = self.rhs(&axpy(x, &[(&k3, 1.0)], h))?;
        let next = axpy(x, &[(&k1, 1.0 / 6.0), (&k2, 1.0 / 3.0), (&k3, 1.0 / 3.0), (&k4, 1.0 / 6.0)], h);
        self.monitor(x, &k1, h);
        state.positions = next;
        state.t += h;
        self.stats.accepted += 1;
        Ok(())
    }

    fn initial_step(&mut self, x: &[Point2], k1: &[Point2], tol: f64) -> f64 {
        let vmax = k1.iter().map(|p| p.norm()).fold(0.0, f64::max);
        let d = min_pair_distance(x);
        if vmax == 0.0 || !d.is_finite() {
            return 1e-2;
        }
        (0.01 * d / vmax * tol.powf(0.2) * 10.0).max(1e-10)
    }

    fn dopri(&mut self, state: &mut VortexState, t_target: f64, dir: f64, tol: f64) -> Result<()> {
        let x = state.positions.clone();
        let k1 = match self.fsal.take() {
            Some((t, k)) if t == state.t => k,
            _ => self.rhs(&x)?,
        };
        let mut h = self.dt.unwrap_or_else(|| self.initial_step(&x, &k1, tol));
        loop {
            let remaining = (t_target - state.t).abs();
            let capped = h >= remaining;
            let step = if capped { remaining } else { h };
            if step < MIN_STEP && !capped {
                return Err(Error::StepUnderflow { t: state.t, dt: step });
            }
            let hs = dir * step;
            let k2 = self.rhs(&axpy(&x, &[(&k1, A[0][0])], hs))?;
            let k3 = self.rhs(&axpy(&x, &[(&k1, A[1][0]), (&k2, A[1][1])], hs))?;
            let k4 = self.rhs(&axpy(&x, &[(&k1, A[2][0]), (&k2, A[2][1]), (&k3, A[2][2])], hs))?;
            let k5 = self.rhs(&axpy(&x, &[(&k1, A[3][0]), (&k2, A[3][1]), (&k3, A[3][2]), (&k4, A[3][3])], hs))?;
            let k6 = self.rhs(&axpy(
                &x,
                &[(&k1, A[4][0]), (&k2, A[4][1]), (&k3, A[4][2]), (&k4, A[4][3]), (&k5, A[4][4])],
                hs,
            ))?;
            let y = axpy(
                &x,
                &[(&k1, A[5][0]), (&k3, A[5][2]), (&k4, A[5][3]), (&k5, A[5][4]), (&k6, A[5][5])],
                hs,
            );
            let k7 = match self.rhs(&y) {
                Ok(k) => k,
                Err(Error::Collision(_)) => {
                    self.stats.rejected += 1;
                    h = 0.25 * step;
                    continue;
                }
                Err(e) => return Err(e),
            };
            // Max norm: an RMS over all vortices lets one tight, fast pair
            // hide behind the rest and spiral in.
            let mut err: f64 = 0.0;
            for idx in 0..x.len() {
                let e = (k1[idx] * E[0] + k3[idx] * E[2] + k4[idx] * E[3] + k5[idx] * E[4] + k6[idx] * E[5] + k7[idx] * E[6]) * hs;
                let sc1 = tol * (1.0 + x[idx].x1.abs().max(y[idx].x1.abs()));
                let sc2 = tol * (1.0 + x[idx].x2.abs().max(y[idx].x2.abs()));
                err = err.max((e.x1 / sc1).abs()).max((e.x2 / sc2).abs());
            }
            if err <= 1.0 {
                let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                self.monitor(&x, &k1, hs);
                self.stats.accepted += 1;
                state.positions = y;
                state.t = if capped { t_target } else { state.t + hs };
                self.fsal = Some((state.t, k7));
                // A step shortened to land on the target says nothing about
                // the natural step size.
                self.dt = Some(if capped { h.max(step * factor) } else { step * factor });
                return Ok(());
            }
            self.stats.rejected += 1;
            h = step * if err.is_finite() { (0.9 * err.powf(-0.2)).clamp(0.2, 1.0) } else { 0.2 };
        }
    }
}

/// Integrates over `spec.t_end` (negative to run backwards). A zero duration
/// returns the input unchanged.
pub fn step(state: &VortexState, spec: &IntegratorSpec) -> Result<VortexState> {
    spec.validate()?;
    let mut s = state.clone();
    Integrator::new(spec.method).advance(&mut s, state.t + spec.t_end)?;
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observer {
    Hamiltonian,
    Center,
    Inertia,
    MinDistance,
}

impl Observer {
    pub const STANDARD: [Observer; 4] = [Observer::Hamiltonian, Observer::Center, Observer::Inertia, Observer::MinDistance];

    pub fn columns(self) -> &'static [&'static str] {
        match self {
            Observer::Hamiltonian => &["H"],
            Observer::Center => &["M1", "M2"],
            Observer::Inertia => &["I"],
            Observer::MinDistance => &["min_dist"],
        }
    }

    pub fn observe(self, state: &VortexState) -> Result<Vec<f64>> {
        Ok(match self {
            Observer::Hamiltonian => vec![hamiltonian(state)?],
            Observer::Center => {
                let (c, _) = center_and_inertia(state);
                vec![c.x1, c.x2]
            }
            Observer::Inertia => vec![center_and_inertia(state).1],
            Observer::MinDistance => vec![min_pair_distance(&state.positions)],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VortexTrace {
    pub observers: Vec<Observer>,
    pub states: Vec<VortexState>,
    /// One row per state, observer columns concatenated.
    pub values: Vec<Vec<f64>>,
    pub stats: IntegratorStats,
}

impl VortexTrace {
    pub fn columns(&self) -> Vec<String> {
        self.observers.iter().flat_map(|o| o.columns().iter().map(|c| c.to_string())).collect()
    }

    /// Values of the named observer column over the trace.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.columns().iter().position(|c| c == name)?;
        Some(self.values.iter().map(|r| r[idx]).collect())
    }

    /// `t, x_1_1, x_1_2, ..., <observer columns>`.
    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        let n = self.states.first().map_or(0, |s| s.n());
        let mut header = vec!["t".to_string()];
        for i in 0..n {
            header.push(format!("x{}_1", i + 1));
            header.push(format!("x{}_2", i + 1));
        }
        header.extend(self.columns());
        writeln!(out, "{}", header.join(","))?;
        for (s, row) in self.states.iter().zip(&self.values) {
            let mut cells = vec![format!("{:e}", s.t)];
            for p in &s.positions {
                cells.push(format!("{:e}", p.x1));
                cells.push(format!("{:e}", p.x2));
            }
            cells.extend(row.iter().map(|v| format!("{v:e}")));
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Integrates to each of `times` (increasing, not before `state0.t`) and
/// records the state and observer values there.
pub fn simulate_at(state0: &VortexState, method: Method, observers: &[Observer], times: &[f64]) -> Result<VortexTrace> {
    IntegratorSpec { method, t_end: 0.0 }.validate()?;
    if times.windows(2).any(|w| w[1] <= w[0]) || times.first().is_some_and(|t| *t < state0.t) {
        return Err(Error::Parameter("sample times must increase from the initial time".into()));
    }
    let mut integ = Integrator::new(method);
    let mut state = state0.clone();
    let mut trace = VortexTrace { observers: observers.to_vec(), states: Vec::new(), values: Vec::new(), stats: IntegratorStats::default() };
    for &t in times {
        integ.advance(&mut state, t)?;
        let mut row = Vec::new();
        for o in observers {
            row.extend(o.observe(&state)?);
        }
        trace.states.push(state.clone());
        trace.values.push(row);
    }
    trace.stats = integ.stats;
    Ok(trace)
}

/// `samples` uniform times on `[t0, t0 + spec.t_end]`, both ends included.
pub fn simulate(state0: &VortexState, spec: IntegratorSpec, observers: &[Observer], samples: usize) -> Result<VortexTrace> {
    spec.validate()?;
    if samples < 2 || !(spec.t_end > 0.0) {
        return Err(Error::Parameter("need t_end > 0 and at least two samples".into()));
    }
    let times: Vec<f64> = (0..samples).map(|k| state0.t + spec.t_end * k as f64 / (samples - 1) as f64).collect();
    simulate_at(state0, spec.method, observers, &times)
}
