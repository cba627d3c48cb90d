//! Reference 2D Euler solution on a square box and its diagnostics.
//!
//! Potentials and velocities are free-space convolutions with `g` (see
//! `spectral`), so nothing here depends on the box being periodic as long as
//! the vorticity stays inside `B(0, L/4)`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dynamics::{self, VortexState};
use crate::error::{Error, Result};
use crate::grid::{DomainSpec, GridField};
use crate::interp::{Stencil, UniformGrid};
use crate::kernel::{self, LogLipschitzOptions, Point2, Rect, SampledVectorField, VectorField, TWO_PI};
use crate::spectral::{i_times, kernel_table, zero_nyquist, Fft2, FreeSpaceSolver};

/// `g ∗ ω`, its gradient and optionally its Hessian, tabulated on the padded
/// transform grid so they can be interpolated anywhere in the original box.
pub struct FieldPotential {
    domain: DomainSpec,
    grid: UniformGrid,
    psi: Vec<f64>,
    d1: Vec<f64>,
    d2: Vec<f64>,
    hessian: Option<[Vec<f64>; 3]>,
    spectrum: Vec<Complex64>,
    period: f64,
    coulomb_energy: f64,
    mass: f64,
}

/// Largest share of `∫|ω|` allowed outside the trusted disk.
pub const SUPPORT_MASS_TOL: f64 = 1e-5;

impl FieldPotential {
    pub fn new(field: &GridField) -> Result<Self> {
        Self::build(field, false)
    }

    pub fn with_hessian(field: &GridField) -> Result<Self> {
        Self::build(field, true)
    }

    fn build(field: &GridField, hessian: bool) -> Result<Self> {
        field.check_finite()?;
        let domain = field.domain;
        // Spectral evolution leaves low ripples across the whole box, so the
        // test is on mass: what lies beyond L/4 perturbs the potential by at
        // most that share times sup|g|.
        let outside = field.abs_mass_fraction_outside(domain.trusted_radius() + 2.0 * domain.h());
        if outside > SUPPORT_MASS_TOL {
            return Err(Error::Domain(format!(
                "{outside:.2e} of the vorticity mass lies beyond L/4 = {}",
                domain.trusted_radius()
            )));
        }
        let mut solver = FreeSpaceSolver::new(domain, true);
        let spectrum = solver.transform(field);
        let psi = solver.apply(&spectrum, false, |_, _, g| Complex64::new(g, 0.0));
        let d1 = solver.apply(&spectrum, true, |k1, _, g| i_times(k1) * g);
        let d2 = solver.apply(&spectrum, true, |_, k2, g| i_times(k2) * g);
        let hessian = if hessian {
            Some([
                solver.apply(&spectrum, false, |k1, _, g| Complex64::new(-k1 * k1 * g, 0.0)),
                solver.apply(&spectrum, true, |k1, k2, g| Complex64::new(-k1 * k2 * g, 0.0)),
                solver.apply(&spectrum, false, |_, k2, g| Complex64::new(-k2 * k2 * g, 0.0)),
            ])
        } else {
            None
        };
        let n = solver.n();
        let grid = UniformGrid { origin: solver.origin(), h: domain.h(), nx: n, ny: n };
        let restricted = solver.restrict(&psi);
        let coulomb_energy =
            restricted.iter().zip(&field.values).map(|(p, w)| p * w).sum::<f64>() * field.cell_area();
        Ok(FieldPotential {
            domain,
            grid,
            psi,
            d1,
            d2,
            hessian,
            spectrum,
            period: solver.period(),
            coulomb_energy,
            mass: field.mass(),
        })
    }

    pub fn domain(&self) -> DomainSpec {
        self.domain
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    /// `∬ g(x-y) ω(x) ω(y)`.
    pub fn coulomb_energy(&self) -> f64 {
        self.coulomb_energy
    }

    /// Points farther than `L/2` from the origin are rejected.
    pub fn stencil(&self, p: Point2) -> Result<Stencil> {
        if !p.is_finite() || p.norm() > 0.5 * self.domain.extent {
            return Err(Error::Domain(format!(
                "point ({}, {}) outside the trusted disk of radius {}",
                p.x1,
                p.x2,
                0.5 * self.domain.extent
            )));
        }
        self.grid
            .stencil(p)
            .ok_or_else(|| Error::Domain("interpolation stencil leaves the grid".into()))
    }

    pub fn potential(&self, p: Point2) -> Result<f64> {
        let s = self.stencil(p)?;
        Ok(self.grid.apply(&self.psi, &s))
    }

    pub fn gradient(&self, p: Point2) -> Result<Point2> {
        let s = self.stencil(p)?;
        Ok(self.gradient_with(&s))
    }

    pub(crate) fn gradient_with(&self, s: &Stencil) -> Point2 {
        Point2::new(self.grid.apply(&self.d1, s), self.grid.apply(&self.d2, s))
    }

    /// `u = ∇⊥(g ∗ ω) = (-∂₂ψ, ∂₁ψ)`.
    pub fn velocity(&self, p: Point2) -> Result<Point2> {
        Ok(self.gradient(p)?.perp())
    }

    /// `[[ψ₁₁, ψ₁₂], [ψ₁₂, ψ₂₂]]`; needs `with_hessian`.
    pub fn hessian(&self, p: Point2) -> Result<[[f64; 2]; 2]> {
        let hs = self
            .hessian
            .as_ref()
            .ok_or_else(|| Error::Parameter("potential built without Hessian".into()))?;
        let s = self.stencil(p)?;
        let a = self.grid.apply(&hs[0], &s);
        let b = self.grid.apply(&hs[1], &s);
        let c = self.grid.apply(&hs[2], &s);
        Ok([[a, b], [b, c]])
    }

    /// Gradient at original-grid node `(ix, iy)`, no interpolation.
    pub fn gradient_at_node(&self, ix: usize, iy: usize) -> Point2 {
        let o = (self.grid.nx - self.domain.m) / 2;
        let idx = (iy + o) * self.grid.nx + ix + o;
        Point2::new(self.d1[idx], self.d2[idx])
    }

    /// Velocity on the original grid.
    pub fn velocity_field(&self) -> SampledVectorField {
        let m = self.domain.m;
        let mut values = Vec::with_capacity(m * m);
        for iy in 0..m {
            for ix in 0..m {
                values.push(self.gradient_at_node(ix, iy).perp());
            }
        }
        SampledVectorField { origin: self.domain.node(0, 0), h: self.domain.h(), nx: m, ny: m, values }
    }

    /// `ω̂(ξ) = ∫ ω e^{-i x·ξ}` at the transform-grid frequency `(a, b)`
    /// (signed indices, spacing `2π/period`).
    pub(crate) fn spectrum_at(&self, a: i64, b: i64) -> Complex64 {
        let n = self.grid.nx as i64;
        let ia = a.rem_euclid(n) as usize;
        let ib = b.rem_euclid(n) as usize;
        // The DFT is referenced to the first transform node at -period/2.
        let sign = if (a + b).rem_euclid(2) == 0 { 1.0 } else { -1.0 };
        self.spectrum[ib * self.grid.nx + ia] * (sign * self.domain.h() * self.domain.h())
    }

    /// `ω̂(ξ)` at an arbitrary frequency by 8-point Lagrange interpolation
    /// of the transform-grid samples. The padded grid oversamples the
    /// spectrum by 2, which keeps the interpolation well conditioned.
    /// Frequencies past the grid's Nyquist limit return zero.
    pub fn transform_at(&self, xi: Point2) -> Complex64 {
        let dk = self.frequency_step();
        let half = (self.grid.nx / 2) as i64;
        let (u, v) = (xi.x1 / dk, xi.x2 / dk);
        if u.abs() > half as f64 || v.abs() > half as f64 {
            return Complex64::default();
        }
        let (wu, a0) = lagrange8(u);
        let (wv, b0) = lagrange8(v);
        let mut acc = Complex64::default();
        for (j, wb) in wv.iter().enumerate() {
            let b = b0 + j as i64;
            if b.abs() >= half {
                continue;
            }
            let mut row = Complex64::default();
            for (i, wa) in wu.iter().enumerate() {
                let a = a0 + i as i64;
                if a.abs() >= half {
                    continue;
                }
                row += self.spectrum_at(a, b) * *wa;
            }
            acc += row * *wb;
        }
        acc
    }

    pub(crate) fn frequency_step(&self) -> f64 {
        TWO_PI / self.period
    }

    #[cfg(test)]
    fn transform_size(&self) -> usize {
        self.grid.nx
    }
}

/// Weights and first node of the 8-point Lagrange stencil around `u`.
fn lagrange8(u: f64) -> ([f64; 8], i64) {
    let base = u.floor() as i64 - 3;
    let mut w = [0.0; 8];
    for (k, wk) in w.iter_mut().enumerate() {
        let nk = (base + k as i64) as f64;
        let mut prod = 1.0;
        for l in 0..8 {
            if l != k {
                let nl = (base + l as i64) as f64;
                prod *= (u - nl) / (nk - nl);
            }
        }
        *wk = prod;
    }
    (w, base)
}

impl VectorField for FieldPotential {
    fn eval(&self, p: Point2) -> Point2 {
        self.velocity(p).unwrap_or(Point2::ZERO)
    }
}

/// Velocity of the field on its own grid.
pub fn biot_savart(field: &GridField) -> Result<SampledVectorField> {
    Ok(FieldPotential::new(field)?.velocity_field())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PotentialMethod {
    /// Padded spectral convolution plus local interpolation.
    #[default]
    Spectral,
    /// Direct sum over cells with exactly integrated kernels, treating `ω`
    /// as constant on each cell. Second order in `h`; slow.
    CellQuadrature,
}

/// `(g ∗ ω)(p)` and `(∇g ∗ ω)(p)` for each point.
pub fn potential_at_points(
    field: &GridField,
    pts: &[Point2],
    method: PotentialMethod,
) -> Result<(Vec<f64>, Vec<Point2>)> {
    match method {
        PotentialMethod::Spectral => {
            let fp = FieldPotential::new(field)?;
            let mut pot = Vec::with_capacity(pts.len());
            let mut grad = Vec::with_capacity(pts.len());
            for p in pts {
                let s = fp.stencil(*p)?;
                pot.push(fp.grid.apply(&fp.psi, &s));
                grad.push(fp.gradient_with(&s));
            }
            Ok((pot, grad))
        }
        PotentialMethod::CellQuadrature => {
            let r = 0.5 * field.domain.extent;
            let mut pot = Vec::with_capacity(pts.len());
            let mut grad = Vec::with_capacity(pts.len());
            for p in pts {
                if !p.is_finite() || p.norm() > r {
                    return Err(Error::Domain(format!("point ({}, {}) outside trusted disk", p.x1, p.x2)));
                }
                let (v, g) = cell_quadrature(field, *p);
                pot.push(v);
                grad.push(g);
            }
            Ok((pot, grad))
        }
    }
}

/// `∫∫ ln(u² + v²) du dv` antiderivative.
fn log_antiderivative(u: f64, v: f64) -> f64 {
    let r2 = u * u + v * v;
    if r2 == 0.0 {
        return 0.0;
    }
    let mut f = u * v * r2.ln() - 3.0 * u * v;
    if u != 0.0 {
        f += u * u * (v / u).atan();
    }
    if v != 0.0 {
        f += v * v * (u / v).atan();
    }
    f
}

/// `∫∫ u / (u² + v²) du dv` antiderivative.
fn grad_antiderivative(u: f64, v: f64) -> f64 {
    let r2 = u * u + v * v;
    if r2 == 0.0 {
        return 0.0;
    }
    let mut f = 0.5 * v * r2.ln();
    if u != 0.0 {
        f += u * (v / u).atan();
    }
    f
}

fn corners(f: impl Fn(f64, f64) -> f64, u0: f64, u1: f64, v0: f64, v1: f64) -> f64 {
    f(u1, v1) - f(u0, v1) - f(u1, v0) + f(u0, v0)
}

fn cell_quadrature(field: &GridField, p: Point2) -> (f64, Point2) {
    let m = field.m();
    let h = field.h();
    let mut pot = 0.0;
    let mut grad = Point2::ZERO;
    for iy in 0..m {
        for ix in 0..m {
            let w = field.values[iy * m + ix];
            if w == 0.0 {
                continue;
            }
            let c = field.domain.node(ix, iy) - p;
            let (u0, u1) = (c.x1 - 0.5 * h, c.x1 + 0.5 * h);
            let (v0, v1) = (c.x2 - 0.5 * h, c.x2 + 0.5 * h);
            pot += w * corners(log_antiderivative, u0, u1, v0, v1);
            grad.x1 += w * corners(grad_antiderivative, u0, u1, v0, v1);
            grad.x2 += w * corners(|a, b| grad_antiderivative(b, a), u0, u1, v0, v1);
        }
    }
    (-pot / (2.0 * TWO_PI), grad * (1.0 / TWO_PI))
}

/// `∬ g(x-y) ω(x) ω(y) dx dy`.
pub fn coulomb_energy(field: &GridField) -> Result<f64> {
    Ok(FieldPotential::new(field)?.coulomb_energy())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldDiagnostics {
    pub t: f64,
    pub mass: f64,
    pub l2: f64,
    pub linf: f64,
    pub coulomb_energy: f64,
    pub log_moment: f64,
}

impl FieldDiagnostics {
    pub fn of(field: &GridField) -> Result<Self> {
        Ok(FieldDiagnostics {
            t: field.t,
            mass: field.mass(),
            l2: field.l2_norm(),
            linf: field.linf_norm(),
            coulomb_energy: coulomb_energy(field)?,
            log_moment: field.log_moment(),
        })
    }
}

pub fn write_diagnostics_csv(rows: &[FieldDiagnostics], out: &mut impl Write) -> Result<()> {
    writeln!(out, "t,mass,l2,linf,coulomb_energy,log_moment")?;
    for r in rows {
        writeln!(
            out,
            "{:e},{:e},{:e},{:e},{:e},{:e}",
            r.t, r.mass, r.l2, r.linf, r.coulomb_energy, r.log_moment
        )?;
    }
    Ok(())
}

/// Pseudospectral Euler solver in vorticity form: advective nonlinearity,
/// 2/3-rule dealiasing of the right-hand side, classical RK4 in time.
pub struct EulerSolver {
    domain: DomainSpec,
    fft: Fft2,
    k: Vec<f64>,
    kernel: Vec<f64>,
    keep: Vec<bool>,
    grid: UniformGrid,
}

struct Rhs {
    value: Vec<Complex64>,
    max_speed: f64,
    u1: Vec<f64>,
    u2: Vec<f64>,
}

impl EulerSolver {
    pub fn new(domain: DomainSpec) -> Self {
        let m = domain.m;
        // Unpadded free-space kernel: exact on B(0, L/4).
        let k: Vec<f64> = (0..m)
            .map(|j| TWO_PI * crate::spectral::signed_index(j, m) as f64 / domain.extent)
            .collect();
        let kernel = kernel_table(&k, 0.5 * domain.extent);
        let cut = m as i64 / 3;
        let keep = (0..m).map(|j| crate::spectral::signed_index(j, m).abs() <= cut).collect();
        EulerSolver {
            domain,
            fft: Fft2::new(m),
            k,
            kernel,
            keep,
            grid: UniformGrid { origin: domain.node(0, 0), h: domain.h(), nx: m, ny: m },
        }
    }

    pub fn domain(&self) -> DomainSpec {
        self.domain
    }

    fn to_spectral(&mut self, field: &GridField) -> Vec<Complex64> {
        let mut data: Vec<Complex64> = field.values.iter().map(|v| Complex64::new(*v, 0.0)).collect();
        self.fft.forward(&mut data);
        data
    }

    fn to_physical(&mut self, w_hat: &[Complex64]) -> Vec<f64> {
        let mut data = w_hat.to_vec();
        self.fft.inverse(&mut data);
        data.iter().map(|c| c.re).collect()
    }

    fn derivative(&mut self, base: &[Complex64], mult: impl Fn(usize, usize) -> Complex64) -> Vec<f64> {
        let m = self.domain.m;
        let mut data: Vec<Complex64> = (0..m * m).map(|idx| base[idx] * mult(idx / m, idx % m)).collect();
        zero_nyquist(&mut data, m);
        self.fft.inverse(&mut data);
        data.iter().map(|c| c.re).collect()
    }

    fn rhs(&mut self, w_hat: &[Complex64]) -> Rhs {
        let m = self.domain.m;
        let (k, kernel) = (self.k.clone(), &self.kernel);
        let psi_hat: Vec<Complex64> = w_hat.iter().zip(kernel).map(|(w, g)| w * g).collect();
        let u1 = self.derivative(&psi_hat, |a, _| -i_times(k[a]));
        let u2 = self.derivative(&psi_hat, |_, b| i_times(k[b]));
        let wx = self.derivative(w_hat, |_, b| i_times(k[b]));
        let wy = self.derivative(w_hat, |a, _| i_times(k[a]));
        let mut max_speed: f64 = 0.0;
        let mut nl: Vec<Complex64> = Vec::with_capacity(m * m);
        for idx in 0..m * m {
            max_speed = max_speed.max(u1[idx].hypot(u2[idx]));
            nl.push(Complex64::new(u1[idx] * wx[idx] + u2[idx] * wy[idx], 0.0));
        }
        self.fft.forward(&mut nl);
        for a in 0..m {
            for b in 0..m {
                let idx = a * m + b;
                nl[idx] = if self.keep[a] && self.keep[b] { -nl[idx] } else { Complex64::default() };
            }
        }
        nl[0] = Complex64::default();
        Rhs { value: nl, max_speed, u1, u2 }
    }

    fn tracer_velocity(&self, rhs: &Rhs, p: Point2) -> Result<Point2> {
        if p.norm() > self.domain.trusted_radius() {
            return Err(Error::Domain(format!("tracer at ({}, {}) left the trusted disk", p.x1, p.x2)));
        }
        let s = self
            .grid
            .stencil(p)
            .ok_or_else(|| Error::Domain("tracer stencil leaves the grid".into()))?;
        Ok(Point2::new(self.grid.apply(&rhs.u1, &s), self.grid.apply(&rhs.u2, &s)))
    }

    /// Courant number `dt · max|u| · m / L` for the given spectral state.
    fn courant(&self, dt: f64, max_speed: f64) -> f64 {
        dt * max_speed / self.domain.h()
    }

    /// One RK4 step in spectral space, advecting optional tracers with the
    /// stage velocities. Returns the maximal speed seen at the first stage.
    fn rk4(&mut self, w_hat: &mut Vec<Complex64>, tracers: &mut [Point2], dt: f64, first: Option<Rhs>) -> Result<f64> {
        let k1 = match first {
            Some(r) => r,
            None => self.rhs(w_hat),
        };
        let courant = self.courant(dt, k1.max_speed);
        if courant > 0.5 + 1e-12 {
            return Err(Error::Cfl(courant));
        }
        let stage = |base: &[Complex64], inc: &[Complex64], c: f64| -> Vec<Complex64> {
            base.iter().zip(inc).map(|(b, d)| b + d * c).collect()
        };
        let v1: Vec<Point2> = tracers.iter().map(|p| self.tracer_velocity(&k1, *p)).collect::<Result<_>>()?;
        let s2 = stage(w_hat, &k1.value, 0.5 * dt);
        let k2 = self.rhs(&s2);
        let p2: Vec<Point2> = tracers.iter().zip(&v1).map(|(p, v)| *p + *v * (0.5 * dt)).collect();
        let v2: Vec<Point2> = p2.iter().map(|p| self.tracer_velocity(&k2, *p)).collect::<Result<_>>()?;
        let s3 = stage(w_hat, &k2.value, 0.5 * dt);
        let k3 = self.rhs(&s3);
        let p3: Vec<Point2> = tracers.iter().zip(&v2).map(|(p, v)| *p + *v * (0.5 * dt)).collect();
        let v3: Vec<Point2> = p3.iter().map(|p| self.tracer_velocity(&k3, *p)).collect::<Result<_>>()?;
        let s4 = stage(w_hat, &k3.value, dt);
        let k4 = self.rhs(&s4);
        let p4: Vec<Point2> = tracers.iter().zip(&v3).map(|(p, v)| *p + *v * dt).collect();
        let v4: Vec<Point2> = p4.iter().map(|p| self.tracer_velocity(&k4, *p)).collect::<Result<_>>()?;
        for idx in 0..w_hat.len() {
            w_hat[idx] += (k1.value[idx] + (k2.value[idx] + k3.value[idx]) * 2.0 + k4.value[idx]) * (dt / 6.0);
        }
        for (i, p) in tracers.iter_mut().enumerate() {
            *p += (v1[i] + (v2[i] + v3[i]) * 2.0 + v4[i]) * (dt / 6.0);
        }
        Ok(k1.max_speed)
    }

    /// One step of size `dt`.
    pub fn step(&mut self, field: &GridField, dt: f64) -> Result<GridField> {
        if field.domain != self.domain {
            return Err(Error::Parameter("field lives on a different domain".into()));
        }
        let mut w_hat = self.to_spectral(field);
        self.rk4(&mut w_hat, &mut [], dt, None)?;
        let values = self.to_physical(&w_hat);
        let out = GridField { values, domain: self.domain, t: field.t + dt };
        out.check_finite()?;
        Ok(out)
    }

    /// Advances to each sample time in turn with steps at Courant number
    /// `cfl`, returning the field at every sample time.
    pub fn evolve(
        &mut self,
        field0: &GridField,
        sample_times: &[f64],
        cfl: f64,
        tracers: &mut [Point2],
        mut on_step: impl FnMut(f64, &[Point2]),
    ) -> Result<Vec<GridField>> {
        if !(cfl > 0.0 && cfl <= 0.5) {
            return Err(Error::Parameter(format!("cfl must lie in (0, 0.5], got {cfl}")));
        }
        if sample_times.windows(2).any(|w| w[1] <= w[0]) || sample_times.first().is_some_and(|t| *t < field0.t) {
            return Err(Error::Parameter("sample times must increase from the initial time".into()));
        }
        let mut w_hat = self.to_spectral(field0);
        let mut t = field0.t;
        let mut out = Vec::with_capacity(sample_times.len());
        for &target in sample_times {
            while target - t > 1e-14 * (1.0 + target.abs()) {
                let k1 = self.rhs(&w_hat);
                let dt_cfl = if k1.max_speed > 0.0 { cfl * self.domain.h() / k1.max_speed } else { f64::INFINITY };
                let dt = dt_cfl.min(target - t);
                self.rk4(&mut w_hat, tracers, dt, Some(k1))?;
                t = if dt == target - t { target } else { t + dt };
                on_step(t, tracers);
            }
            let values = self.to_physical(&w_hat);
            let f = GridField { values, domain: self.domain, t: target };
            f.check_finite()?;
            out.push(f);
        }
        Ok(out)
    }
}

/// One Euler step of size `dt`; fails if the Courant number exceeds 1/2.
pub fn euler_step(field: &GridField, dt: f64) -> Result<GridField> {
    EulerSolver::new(field.domain).step(field, dt)
}

/// `n + 1` uniform times on `[0, t_end]`, excluding zero.
pub fn uniform_times(t_end: f64, samples: usize) -> Vec<f64> {
    (1..samples).map(|k| t_end * k as f64 / (samples - 1) as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TracerReport {
    pub times: Vec<f64>,
    pub separations: Vec<f64>,
    /// `∫₀ᵗ ‖u‖_LL` at each time.
    pub ll_integral: Vec<f64>,
    /// The Hölder bound with unit constant at each time.
    pub bound_unit_c: Vec<f64>,
    /// The bound scaled by `c`.
    pub bound: Vec<f64>,
    pub c: f64,
    /// Smallest constant making the bound hold at every sample.
    pub fitted_c: f64,
    /// Whether `|x - y| ≤ exp(1 - ∫₀ᵀ‖u‖_LL)` held.
    pub precondition_met: bool,
}

/// Advects tracers from `x` and `y` and compares their separation with
/// `c · exp(1 - exp(Λ)) · |x-y|^{exp(-Λ)}`, `Λ(t) = ∫₀ᵗ ‖u‖_LL`, the
/// seminorm being measured on the flow at each sample time.
pub fn tracer_holder_diagnostic(
    field0: &GridField,
    x: Point2,
    y: Point2,
    t_end: f64,
    samples: usize,
    c: f64,
    ll: LogLipschitzOptions,
) -> Result<TracerReport> {
    if samples < 2 {
        return Err(Error::Parameter("need at least two samples".into()));
    }
    let times = uniform_times(t_end, samples);
    let mut solver = EulerSolver::new(field0.domain);
    let mut tracers = [x, y];
    let mut seps = vec![(x - y).norm()];
    let mut marks = vec![0.0];
    let mut fields = vec![field0.clone()];
    for &t in &times {
        let f = solver.evolve(fields.last().expect("nonempty"), &[t], 0.4, &mut tracers, |_, _| {})?;
        seps.push((tracers[0] - tracers[1]).norm());
        marks.push(t);
        fields.extend(f);
    }
    let r = field0.domain.trusted_radius();
    let region = Rect { min: Point2::new(-r, -r) * (1.0 / 2f64.sqrt()), max: Point2::new(r, r) * (1.0 / 2f64.sqrt()) };
    let mut lls = Vec::with_capacity(fields.len());
    for f in &fields {
        let fp = FieldPotential::new(f)?;
        lls.push(kernel::log_lipschitz_seminorm(&fp, region, ll)?);
    }
    let mut lambda = vec![0.0];
    for k in 1..lls.len() {
        let dt = marks[k] - marks[k - 1];
        lambda.push(lambda[k - 1] + 0.5 * dt * (lls[k] + lls[k - 1]));
    }
    let d0 = (x - y).norm();
    let bound_unit_c: Vec<f64> = lambda.iter().map(|l| (1.0 - l.exp()).exp() * d0.powf((-l).exp())).collect();
    let fitted_c = seps
        .iter()
        .zip(&bound_unit_c)
        .map(|(s, b)| if *b > 0.0 { s / b } else { 0.0 })
        .fold(0.0, f64::max);
    Ok(TracerReport {
        times: marks,
        separations: seps,
        bound: bound_unit_c.iter().map(|b| b * c).collect(),
        bound_unit_c,
        ll_integral: lambda.clone(),
        c,
        fitted_c,
        precondition_met: d0 <= (1.0 - lambda.last().copied().unwrap_or(0.0)).exp(),
    })
}

/// Smooth test function `φ(t, x)` for the weak vorticity formulation.
pub trait TestFunction {
    fn value(&self, t: f64, x: Point2) -> f64;
    fn gradient(&self, t: f64, x: Point2) -> Point2;
    fn time_derivative(&self, t: f64, x: Point2) -> f64;
    /// Radius about the origin outside which `φ` is negligible, if bounded.
    fn support_radius(&self) -> Option<f64>;
}

/// `(1 + rate·t) · exp(-|x - c|² / 2w²)`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianTest {
    pub center: Point2,
    pub width: f64,
    pub rate: f64,
}

impl TestFunction for GaussianTest {
    fn value(&self, t: f64, x: Point2) -> f64 {
        (1.0 + self.rate * t) * (-(x - self.center).norm2() / (2.0 * self.width * self.width)).exp()
    }

    fn gradient(&self, t: f64, x: Point2) -> Point2 {
        let d = x - self.center;
        d * (-self.value(t, x) / (self.width * self.width))
    }

    fn time_derivative(&self, _t: f64, x: Point2) -> f64 {
        self.rate * (-(x - self.center).norm2() / (2.0 * self.width * self.width)).exp()
    }

    fn support_radius(&self) -> Option<f64> {
        Some(self.center.norm() + 9.0 * self.width)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantTest(pub f64);

impl TestFunction for ConstantTest {
    fn value(&self, _t: f64, _x: Point2) -> f64 {
        self.0
    }
    fn gradient(&self, _t: f64, _x: Point2) -> Point2 {
        Point2::ZERO
    }
    fn time_derivative(&self, _t: f64, _x: Point2) -> f64 {
        0.0
    }
    fn support_radius(&self) -> Option<f64> {
        None
    }
}

/// A sampled trajectory to test against the weak formulation.
pub enum WeakTrace<'a> {
    Field(&'a [GridField]),
    Empirical(&'a [VortexState]),
}

/// `∫φ(T)dω(T) - ∫φ(0)dω(0) - ∫₀ᵀ∫(∂ₜφ + u·∇φ) dω dt`, with the time
/// integral by the trapezoid rule over the trace samples. For empirical
/// measures the velocity excludes self-interaction.
pub fn weak_form_residual(trace: WeakTrace<'_>, phi: &impl TestFunction) -> Result<f64> {
    let (times, values, rates): (Vec<f64>, Vec<f64>, Vec<f64>) = match trace {
        WeakTrace::Field(fields) => {
            if fields.len() < 2 {
                return Err(Error::Parameter("trace needs at least two samples".into()));
            }
            if let Some(r) = phi.support_radius() {
                if r > 0.5 * fields[0].domain.extent {
                    return Err(Error::Domain(format!("test function support radius {r} leaves the box")));
                }
            }
            let mut ts = Vec::new();
            let mut vs = Vec::new();
            let mut rs = Vec::new();
            for f in fields {
                let fp = FieldPotential::new(f)?;
                let t = f.t;
                let m = f.m();
                let mut val = 0.0;
                let mut rate = 0.0;
                for iy in 0..m {
                    for ix in 0..m {
                        let w = f.values[iy * m + ix];
                        if w == 0.0 {
                            continue;
                        }
                        let x = f.domain.node(ix, iy);
                        let u = fp.gradient_at_node(ix, iy).perp();
                        val += w * phi.value(t, x);
                        rate += w * (phi.time_derivative(t, x) + u.dot(phi.gradient(t, x)));
                    }
                }
                ts.push(t);
                vs.push(val * f.cell_area());
                rs.push(rate * f.cell_area());
            }
            (ts, vs, rs)
        }
        WeakTrace::Empirical(states) => {
            if states.len() < 2 {
                return Err(Error::Parameter("trace needs at least two samples".into()));
            }
            let mut ts = Vec::new();
            let mut vs = Vec::new();
            let mut rs = Vec::new();
            for s in states {
                let n = s.n() as f64;
                let vel = dynamics::velocities(&s.positions)?;
                let mut val = 0.0;
                let mut rate = 0.0;
                for (p, v) in s.positions.iter().zip(&vel) {
                    val += phi.value(s.t, *p);
                    rate += phi.time_derivative(s.t, *p) + v.dot(phi.gradient(s.t, *p));
                }
                ts.push(s.t);
                vs.push(val / n);
                rs.push(rate / n);
            }
            (ts, vs, rs)
        }
    };
    let mut integral = 0.0;
    for k in 1..times.len() {
        integral += 0.5 * (times[k] - times[k - 1]) * (rates[k] + rates[k - 1]);
    }
    Ok(values[values.len() - 1] - values[0] - integral)
}

/// `n` i.i.d. draws from the bilinear interpolant of a nonnegative field, by
/// rejection against its maximum. Deterministic in `seed`.
pub fn sample_from_density(field: &GridField, n: usize, seed: u64) -> Result<VortexState> {
    if n == 0 {
        return Err(Error::Parameter("need at least one sample".into()));
    }
    if !field.is_nonnegative() {
        return Err(Error::Sampling("density has negative entries".into()));
    }
    let top = field.max();
    if !(top > 0.0) {
        return Err(Error::Sampling("density vanishes identically".into()));
    }
    let m = field.m();
    let h = field.h();
    let (mut lo, mut hi) = ((m, m), (0usize, 0usize));
    for iy in 0..m {
        for ix in 0..m {
            if field.values[iy * m + ix] > 0.0 {
                lo = (lo.0.min(ix), lo.1.min(iy));
                hi = (hi.0.max(ix), hi.1.max(iy));
            }
        }
    }
    let lo = (lo.0.saturating_sub(1), lo.1.saturating_sub(1));
    let hi = ((hi.0 + 1).min(m - 1), (hi.1 + 1).min(m - 1));
    let (x0, x1) = (field.domain.coord(lo.0), field.domain.coord(hi.0));
    let (y0, y1) = (field.domain.coord(lo.1), field.domain.coord(hi.1));
    let bilinear = |p: Point2| -> f64 {
        let fx = (p.x1 - field.domain.coord(0)) / h;
        let fy = (p.x2 - field.domain.coord(0)) / h;
        let ix = (fx.floor() as usize).min(m - 2);
        let iy = (fy.floor() as usize).min(m - 2);
        let (tx, ty) = (fx - ix as f64, fy - iy as f64);
        field.get(ix, iy) * (1.0 - tx) * (1.0 - ty)
            + field.get(ix + 1, iy) * tx * (1.0 - ty)
            + field.get(ix, iy + 1) * (1.0 - tx) * ty
            + field.get(ix + 1, iy + 1) * tx * ty
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions = Vec::with_capacity(n);
    let max_tries = 10_000usize.saturating_mul(n).max(1_000_000);
    let mut tries = 0usize;
    while positions.len() < n {
        tries += 1;
        if tries > max_tries {
            return Err(Error::Sampling("acceptance rate too low".into()));
        }
        let p = Point2::new(rng.gen_range(x0..x1), rng.gen_range(y0..y1));
        let u: f64 = rng.gen();
        if u * top < bilinear(p) {
            positions.push(p);
        }
    }
    VortexState::new(positions, field.t)
}
