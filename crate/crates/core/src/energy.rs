//! The modulated energy between a vortex configuration and a continuum
//! vorticity, its renormalized form, counting diagnostics, a negative Sobolev
//! distance, and the two identities that drive the energy's evolution.

use std::collections::HashMap;
use std::num::NonZeroUsize;

use gauss_quad::legendre::GaussLegendre;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dynamics::{self, VortexState, COLLISION_DISTANCE};
use crate::error::{Error, Result};
use crate::euler::FieldPotential;
use crate::grid::GridField;
use crate::interp::UniformGrid;
use crate::kernel::{Point2, SampledVectorField, TWO_PI};
use crate::spectral::{i_times, FreeSpaceSolver};

const MASS_TOL: f64 = 1e-6;

fn check_unit_mass(mass: f64) -> Result<()> {
    if (mass - 1.0).abs() > MASS_TOL {
        return Err(Error::Parameter(format!("vorticity must be a probability density, mass = {mass}")));
    }
    Ok(())
}

fn g(r: f64) -> f64 {
    -r.ln() / TWO_PI
}

/// Per-vortex truncation radii.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationVector {
    eta: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaSummary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl TruncationVector {
    pub fn new(eta: Vec<f64>) -> Result<Self> {
        if eta.is_empty() || eta.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
            return Err(Error::Parameter("truncation radii must be positive and finite".into()));
        }
        Ok(TruncationVector { eta })
    }

    pub fn uniform(n: usize, eta: f64) -> Result<Self> {
        Self::new(vec![eta; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.eta
    }

    pub fn len(&self) -> usize {
        self.eta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eta.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.eta.iter().copied().fold(0.0, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.eta.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn summary(&self) -> EtaSummary {
        EtaSummary { min: self.min(), max: self.max(), mean: self.eta.iter().sum::<f64>() / self.len() as f64 }
    }

    /// `Σ g̃(ηᵢ)`.
    pub fn self_energy(&self) -> f64 {
        self.eta.iter().map(|e| g(*e)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    /// `Σ_{i≠j} g(xᵢ - xⱼ) / N²`.
    pub pair_sum: f64,
    /// `-(2/N) Σ (g ∗ ω)(xᵢ)`.
    pub cross: f64,
    /// `∬ g(x - y) ω(x) ω(y)`.
    pub continuum: f64,
    pub f_avg: f64,
    /// `(∫|∇H_{N,η}|² - Σ g̃(ηᵢ)) / N²` when a truncation vector was given.
    pub renormalized: Option<f64>,
    pub n: usize,
    pub t: f64,
    pub m: usize,
    pub eta: Option<EtaSummary>,
}

impl EnergyReport {
    /// Unaveraged energy `F_N = N² F_N^avg`.
    pub fn f_n(&self) -> f64 {
        (self.n * self.n) as f64 * self.f_avg
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// `F_N^avg` between the empirical measure of `state` and `field`.
pub fn f_n_avg(state: &VortexState, field: &GridField) -> Result<EnergyReport> {
    let fp = FieldPotential::new(field)?;
    f_n_avg_with(state, &fp, field.t)
}

/// As `f_n_avg`, reusing a precomputed potential.
pub fn f_n_avg_with(state: &VortexState, fp: &FieldPotential, t: f64) -> Result<EnergyReport> {
    check_unit_mass(fp.mass())?;
    let n = state.n() as f64;
    let pair_sum = 2.0 * dynamics::hamiltonian(state)?;
    let mut psi_sum = 0.0;
    for p in &state.positions {
        psi_sum += fp.potential(*p)?;
    }
    let cross = -2.0 * psi_sum / n;
    let continuum = fp.coulomb_energy();
    Ok(EnergyReport {
        pair_sum,
        cross,
        continuum,
        f_avg: pair_sum + cross + continuum,
        renormalized: None,
        n: state.n(),
        t,
        m: fp.domain().m,
        eta: None,
    })
}

/// `f_n_avg` plus the renormalized field energy for `eta`.
pub fn f_n_avg_renormalized(
    state: &VortexState,
    field: &GridField,
    eta: &TruncationVector,
    resolution: usize,
) -> Result<EnergyReport> {
    let fp = FieldPotential::new(field)?;
    let mut report = f_n_avg_with(state, &fp, field.t)?;
    let h = h_field_energy_with(state, &fp, eta, resolution)?;
    let n2 = (state.n() * state.n()) as f64;
    report.renormalized = Some((h - eta.self_energy()) / n2);
    report.eta = Some(eta.summary());
    Ok(report)
}

/// `∫ |∇H_{N,η}|²` with `H_{N,η} = g ∗ (Σ δ^{(ηᵢ)}_{xᵢ} - Nω)`.
///
/// Evaluated through the equivalent Coulomb energy of the signed measure
/// `Σ δ^{(ηᵢ)}_{xᵢ} - Nω`: circle-circle interactions are exact for disjoint
/// circles and one-dimensional Gauss quadratures otherwise, circle averages
/// of `g ∗ ω` use the periodic trapezoid rule, and the continuum term comes
/// from the spectral potential. `resolution` sets the quadrature order.
pub fn h_field_energy(state: &VortexState, field: &GridField, eta: &TruncationVector, resolution: usize) -> Result<f64> {
    let fp = FieldPotential::new(field)?;
    h_field_energy_with(state, &fp, eta, resolution)
}

pub fn h_field_energy_with(
    state: &VortexState,
    fp: &FieldPotential,
    eta: &TruncationVector,
    resolution: usize,
) -> Result<f64> {
    let n = state.n();
    if eta.len() != n {
        return Err(Error::Parameter(format!("{} truncation radii for {n} vortices", eta.len())));
    }
    if resolution < 8 {
        return Err(Error::Parameter(format!("resolution must be at least 8, got {resolution}")));
    }
    let h = fp.domain().h();
    if eta.min() <= 2.0 * h {
        return Err(Error::Resolution(format!(
            "truncation radius {} is within two grid cells (h = {h})",
            eta.min()
        )));
    }
    check_unit_mass(fp.mass())?;
    let gl = GaussLegendre::new(NonZeroUsize::new(resolution).expect("resolution >= 8"));
    let x = &state.positions;
    let e = eta.as_slice();
    let mut pairs = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                pairs += smeared_interaction((x[i] - x[j]).norm(), e[i], e[j], &gl);
            }
        }
    }
    let mut averages = 0.0;
    for i in 0..n {
        let nodes = resolution.max((8.0 * TWO_PI * e[i] / h).ceil() as usize);
        averages += circle_average(fp, x[i], e[i], nodes)?;
    }
    let nf = n as f64;
    Ok(eta.self_energy() + pairs - 2.0 * nf * averages + nf * nf * fp.coulomb_energy())
}

/// `∬ g d δ^{(ηᵢ)}_0 d δ^{(ηⱼ)}_{(d,0)}`: the mean over circle `j` of the
/// truncated potential `g(max(|y|, ηᵢ))`.
fn smeared_interaction(d: f64, ei: f64, ej: f64, gl: &GaussLegendre) -> f64 {
    if (d - ej).abs() >= ei {
        // Circle j avoids disk i: mean value property of g.
        return g(d.max(ej));
    }
    if d + ej <= ei {
        return g(ei);
    }
    let c = ((ei * ei - d * d - ej * ej) / (2.0 * d * ej)).clamp(-1.0, 1.0);
    let theta0 = c.acos();
    // Outside arc [0, θ₀); the integrand is smooth there but varies fastest
    // near θ₀, so panels are graded toward it.
    let outside = |th: f64| -(d * d + ej * ej + 2.0 * d * ej * th.cos()).ln() / (2.0 * TWO_PI);
    let edges = [0.0, 0.5, 0.75, 0.875, 0.9375, 1.0];
    let integral: f64 = edges.windows(2).map(|w| gl.integrate(w[0] * theta0, w[1] * theta0, outside)).sum();
    (integral + (std::f64::consts::PI - theta0) * g(ei)) / std::f64::consts::PI
}

/// Mean of `g ∗ ω` over the circle `∂B(x, η)`.
fn circle_average(fp: &FieldPotential, x: Point2, eta: f64, nodes: usize) -> Result<f64> {
    let mut s = 0.0;
    for k in 0..nodes {
        let th = TWO_PI * k as f64 / nodes as f64;
        s += fp.potential(x + Point2::polar(eta, th))?;
    }
    Ok(s / nodes as f64)
}

/// `r_{i,ε₁} = min{¼ min_{j≠i} |xᵢ - xⱼ|, ε₁}`.
pub fn r_vector(state: &VortexState, eps1: f64) -> Result<TruncationVector> {
    if !(eps1 > 0.0) || !eps1.is_finite() {
        return Err(Error::Parameter(format!("eps1 must be positive, got {eps1}")));
    }
    let x = &state.positions;
    let mut nearest = vec![f64::INFINITY; x.len()];
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let d = (x[i] - x[j]).norm();
            nearest[i] = nearest[i].min(d);
            nearest[j] = nearest[j].min(d);
        }
    }
    if let Some(d) = nearest.iter().find(|d| **d < COLLISION_DISTANCE) {
        return Err(Error::Collision(*d));
    }
    TruncationVector::new(nearest.iter().map(|d| (0.25 * d).min(eps1)).collect())
}

/// Calls `f(i, j, d)` for every unordered pair `i < j` with `d ≤ eps`, using
/// a uniform cell list.
fn for_each_close_pair(x: &[Point2], eps: f64, mut f: impl FnMut(usize, usize, f64)) {
    if x.len() < 2 {
        return;
    }
    let (mut lo, mut hi) = (x[0], x[0]);
    for p in x {
        lo = Point2::new(lo.x1.min(p.x1), lo.x2.min(p.x2));
        hi = Point2::new(hi.x1.max(p.x1), hi.x2.max(p.x2));
    }
    let span = (hi.x1 - lo.x1).max(hi.x2 - lo.x2);
    // Cells no smaller than eps keep the 3×3 neighbourhood sufficient; the
    // floor keeps keys bounded for tiny eps.
    let cell = eps.max(span / (1u64 << 20) as f64).max(f64::MIN_POSITIVE);
    let key = |p: Point2| (((p.x1 - lo.x1) / cell).floor() as i64, ((p.x2 - lo.x2) / cell).floor() as i64);
    let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in x.iter().enumerate() {
        buckets.entry(key(*p)).or_default().push(i);
    }
    for (i, p) in x.iter().enumerate() {
        let (kx, ky) = key(*p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(list) = buckets.get(&(kx + dx, ky + dy)) {
                    for &j in list {
                        if j > i {
                            let d = (*p - x[j]).norm();
                            if d <= eps {
                                f(i, j, d);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Number of ordered pairs `(i, j)`, `i ≠ j`, with `|xᵢ - xⱼ| ≤ ε₃`.
pub fn count_close_pairs(state: &VortexState, eps3: f64) -> Result<usize> {
    if !(eps3 > 0.0) {
        return Err(Error::Parameter(format!("eps3 must be positive, got {eps3}")));
    }
    let mut count = 0;
    for_each_close_pair(&state.positions, eps3, |_, _, _| count += 2);
    Ok(count)
}

/// `Σ_{i≠j, |xᵢ-xⱼ| ≤ ε₃} g(xᵢ - xⱼ)` over ordered pairs.
pub fn close_pair_energy(state: &VortexState, eps3: f64) -> Result<f64> {
    if !(eps3 > 0.0) {
        return Err(Error::Parameter(format!("eps3 must be positive, got {eps3}")));
    }
    let mut sum = 0.0;
    let mut closest = f64::INFINITY;
    for_each_close_pair(&state.positions, eps3, |_, _, d| {
        closest = closest.min(d);
        sum += 2.0 * g(d);
    });
    if closest < COLLISION_DISTANCE {
        return Err(Error::Collision(closest));
    }
    Ok(sum)
}

/// A probability measure whose Fourier transform `hs_distance` can evaluate.
pub enum Measure<'a> {
    Empirical(&'a VortexState),
    Field(&'a FieldPotential),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HsConfig {
    /// Sobolev exponent, below -1.
    pub s: f64,
    /// Radial frequency cutoff `K`.
    pub freq_cut: f64,
    /// Angular nodes on `[0, π)`; the other half follows from `f̂(-ξ) = conj f̂(ξ)`.
    pub angles: usize,
    /// Simpson intervals on `[0, K]` (even).
    pub radial_intervals: usize,
    /// Flag the result when the unmodeled tail exceeds this fraction.
    pub tail_tol: f64,
}

impl HsConfig {
    pub fn new(s: f64, freq_cut: f64) -> Self {
        HsConfig { s, freq_cut, angles: 128, radial_intervals: 1024, tail_tol: 1e-3 }
    }

    fn validate(&self) -> Result<()> {
        if !(self.s < -1.0) {
            return Err(Error::Parameter(format!("Sobolev exponent must be below -1, got {}", self.s)));
        }
        if !(self.freq_cut > 0.0) || !self.freq_cut.is_finite() {
            return Err(Error::Parameter(format!("frequency cutoff must be positive, got {}", self.freq_cut)));
        }
        if self.angles < 8 || self.radial_intervals < 2 || self.radial_intervals % 2 != 0 {
            return Err(Error::Parameter("need at least 8 angles and an even number of radial intervals".into()));
        }
        Ok(())
    }
}

/// Default cutoff `64 · 2π / L`.
pub fn default_freq_cut(extent: f64) -> f64 {
    64.0 * TWO_PI / extent
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HsReport {
    pub distance: f64,
    pub distance_sq: f64,
    /// Analytic contribution of the empirical self-terms beyond the cutoff,
    /// included in `distance_sq`.
    pub diagonal_tail: f64,
    /// Estimate of what lies beyond the cutoff and is not modeled.
    pub tail_estimate: f64,
    pub tail_fraction: f64,
    pub truncated: bool,
}

/// `‖ω_N - ω‖_{H^s}` with the field transform taken from its grid spectrum.
pub fn hs_distance(state: &VortexState, field: &GridField, s: f64, freq_cut: f64) -> Result<HsReport> {
    let fp = FieldPotential::new(field)?;
    hs_distance_between(&Measure::Empirical(state), &Measure::Field(&fp), &HsConfig::new(s, freq_cut))
}

/// `(2π)^{-2} ∫ |â(ξ) - b̂(ξ)|² ⟨ξ⟩^{2s} dξ`, square-rooted, on a polar grid.
pub fn hs_distance_between(a: &Measure, b: &Measure, cfg: &HsConfig) -> Result<HsReport> {
    cfg.validate()?;
    let k_max = cfg.freq_cut;
    let nr = cfg.radial_intervals;
    let dr = k_max / nr as f64;
    let rho: Vec<f64> = (0..=nr).map(|k| k as f64 * dr).collect();
    let simpson: Vec<f64> = (0..=nr)
        .map(|k| {
            let c = if k == 0 || k == nr { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
            c * dr / 3.0
        })
        .collect();
    let weight: Vec<f64> = rho.iter().zip(&simpson).map(|(r, w)| w * r * (1.0 + r * r).powf(cfg.s)).collect();

    let diag_level = diagonal_level(a, b);
    let shell_start = nr - nr / 16;
    let mut total = 0.0;
    let mut shell = 0.0;
    let mut shell_count = 0usize;
    let mut ta = vec![Complex64::default(); nr + 1];
    let mut tb = vec![Complex64::default(); nr + 1];
    for ia in 0..cfg.angles {
        let theta = std::f64::consts::PI * ia as f64 / cfg.angles as f64;
        let dir = Point2::polar(1.0, theta);
        ray_transform(a, dir, dr, &rho, &mut ta);
        ray_transform(b, dir, dr, &rho, &mut tb);
        let mut line = 0.0;
        for k in 0..=nr {
            let diff = (ta[k] - tb[k]).norm_sqr();
            line += weight[k] * diff;
            if k >= shell_start {
                shell += diff;
                shell_count += 1;
            }
        }
        total += line;
    }
    // Trapezoid over the full circle, each angle standing for itself and its
    // antipode.
    let dtheta = std::f64::consts::PI / cfg.angles as f64;
    let resolved = total * 2.0 * dtheta / (TWO_PI * TWO_PI);
    let tail_weight = (1.0 + k_max * k_max).powf(cfg.s + 1.0) / (-2.0 * (cfg.s + 1.0)) / TWO_PI;
    let diagonal_tail = diag_level * tail_weight;
    let distance_sq = resolved + diagonal_tail;
    let tail_estimate = (shell / shell_count as f64 - diag_level).abs() * tail_weight;
    let tail_fraction = if distance_sq > 0.0 { tail_estimate / distance_sq } else { 0.0 };
    Ok(HsReport {
        distance: distance_sq.max(0.0).sqrt(),
        distance_sq,
        diagonal_tail,
        tail_estimate,
        tail_fraction,
        truncated: tail_fraction > cfg.tail_tol,
    })
}

/// Large-frequency mean of `|â - b̂|²`: only coincident atoms survive the
/// angular averaging.
fn diagonal_level(a: &Measure, b: &Measure) -> f64 {
    fn atoms<'m>(m: &'m Measure) -> Option<&'m [Point2]> {
        match m {
            Measure::Empirical(s) => Some(&s.positions),
            Measure::Field(_) => None,
        }
    }
    match (atoms(a), atoms(b)) {
        (Some(x), Some(y)) => {
            let (na, nb) = (x.len() as f64, y.len() as f64);
            let mut seen: HashMap<(u64, u64), usize> = HashMap::new();
            for p in x {
                *seen.entry((p.x1.to_bits(), p.x2.to_bits())).or_default() += 1;
            }
            let shared: usize = y.iter().map(|p| seen.get(&(p.x1.to_bits(), p.x2.to_bits())).copied().unwrap_or(0)).sum();
            1.0 / na + 1.0 / nb - 2.0 * shared as f64 / (na * nb)
        }
        (Some(x), None) | (None, Some(x)) => 1.0 / x.len() as f64,
        (None, None) => 0.0,
    }
}

/// Transform of `m` along the ray `ρ · dir` at the uniform radii `rho`.
fn ray_transform(m: &Measure, dir: Point2, dr: f64, rho: &[f64], out: &mut [Complex64]) {
    out.iter_mut().for_each(|c| *c = Complex64::default());
    match m {
        Measure::Empirical(state) => {
            // e^{-iρ p} by repeated rotation, re-seeded to bound drift.
            for x in &state.positions {
                let p = x.dot(dir);
                let rot = Complex64::from_polar(1.0, -dr * p);
                let mut w = Complex64::new(1.0, 0.0);
                for (k, o) in out.iter_mut().enumerate() {
                    if k % 64 == 0 {
                        w = Complex64::from_polar(1.0, -rho[k] * p);
                    }
                    *o += w;
                    w *= rot;
                }
            }
            let inv = 1.0 / state.n() as f64;
            out.iter_mut().for_each(|c| *c *= inv);
        }
        Measure::Field(fp) => {
            for (o, r) in out.iter_mut().zip(rho) {
                *o = fp.transform_at(dir * *r);
            }
        }
    }
}

/// `∇v` at every node of a sampled field: fourth-order central differences
/// inside, lower order near the edges. Rows are `[∂₁v¹, ∂₂v¹, ∂₁v², ∂₂v²]`.
fn sampled_jacobian(v: &SampledVectorField) -> Vec<[f64; 4]> {
    let (nx, ny, h) = (v.nx, v.ny, v.h);
    let deriv = |get: &dyn Fn(usize) -> Point2, i: usize, n: usize| -> Point2 {
        if i >= 2 && i + 2 < n {
            (get(i - 2) - get(i + 2) + (get(i + 1) - get(i - 1)) * 8.0) * (1.0 / (12.0 * h))
        } else if i >= 1 && i + 1 < n {
            (get(i + 1) - get(i - 1)) * (0.5 / h)
        } else if i == 0 {
            (get(1) - get(0)) * (1.0 / h)
        } else {
            (get(i) - get(i - 1)) * (1.0 / h)
        }
    };
    let mut out = Vec::with_capacity(nx * ny);
    for iy in 0..ny {
        for ix in 0..nx {
            let dx = deriv(&|k| v.get(k, iy), ix, nx);
            let dy = deriv(&|k| v.get(ix, k), iy, ny);
            out.push([dx.x1, dy.x1, dx.x2, dy.x2]);
        }
    }
    out
}

/// Largest difference quotient of `v` at grid offset `step`.
fn discrete_lipschitz(v: &SampledVectorField, step: usize) -> f64 {
    let mut lip: f64 = 0.0;
    for iy in 0..v.ny {
        for ix in 0..v.nx {
            let p = v.get(ix, iy);
            if ix + step < v.nx {
                lip = lip.max((v.get(ix + step, iy) - p).norm());
            }
            if iy + step < v.ny {
                lip = lip.max((v.get(ix, iy + step) - p).norm());
            }
        }
    }
    lip / (step as f64 * v.h)
}

/// Both sides of
/// `∬ (v(x) - v(y)) · ∇g(x - y) dμ(x) dν(y) = ∫ ∇v : [g∗μ, g∗ν]_SE`.
///
/// The left side is a direct double sum over grid cells (the diagonal cell
/// pairs contribute nothing in the limit and are skipped); the right side
/// integrates the stress-energy tensor of the two spectral potentials over
/// the grid. `v` must be sampled on the fields' grid and should vanish near
/// its edge, since the right side only sees the box.
pub fn se_divergence_check(v: &SampledVectorField, mu: &GridField, nu: &GridField) -> Result<(f64, f64)> {
    if mu.domain != nu.domain {
        return Err(Error::Parameter("measures live on different grids".into()));
    }
    let domain = mu.domain;
    let m = domain.m;
    let h = domain.h();
    if v.nx != m || v.ny != m || (v.h - h).abs() > 1e-12 * h || (v.origin - domain.node(0, 0)).norm() > 1e-12 * h {
        return Err(Error::Parameter("vector field must be sampled on the measures' grid".into()));
    }
    let (lip1, lip2) = (discrete_lipschitz(v, 1), discrete_lipschitz(v, 2));
    if !lip1.is_finite() || lip1 > 1.5 * lip2 + 1e-12 {
        return Err(Error::Parameter(format!(
            "vector field is not resolved as Lipschitz (difference quotients {lip1:e} at h, {lip2:e} at 2h)"
        )));
    }

    let cells = |f: &GridField| -> Vec<(usize, Point2, f64, Point2)> {
        let cut = 1e-14 * f.linf_norm();
        let mut out = Vec::new();
        for iy in 0..m {
            for ix in 0..m {
                let w = f.values[iy * m + ix];
                if w.abs() > cut {
                    out.push((iy * m + ix, domain.node(ix, iy), w * h * h, v.get(ix, iy)));
                }
            }
        }
        out
    };
    let (cm, cn) = (cells(mu), cells(nu));
    let mut lhs = 0.0;
    for (ia, xa, wa, va) in &cm {
        let mut row = 0.0;
        for (ib, yb, wb, vb) in &cn {
            if ia == ib {
                continue;
            }
            let d = *xa - *yb;
            row += wb * (*va - *vb).dot(d) / d.norm2();
        }
        lhs += wa * row;
    }
    lhs *= -1.0 / TWO_PI;

    let pm = FieldPotential::new(mu)?;
    let pn = if mu == nu { None } else { Some(FieldPotential::new(nu)?) };
    let pn = pn.as_ref().unwrap_or(&pm);
    let jac = sampled_jacobian(v);
    let mut rhs = 0.0;
    for iy in 0..m {
        for ix in 0..m {
            let a = pm.gradient_at_node(ix, iy);
            let b = pn.gradient_at_node(ix, iy);
            let ab = a.dot(b);
            let t11 = 2.0 * a.x1 * b.x1 - ab;
            let t22 = 2.0 * a.x2 * b.x2 - ab;
            let t12 = a.x1 * b.x2 + a.x2 * b.x1;
            let [d1v1, d2v1, d1v2, d2v2] = jac[iy * m + ix];
            rhs += d1v1 * t11 + d2v2 * t22 + (d2v1 + d1v2) * t12;
        }
    }
    Ok((lhs, rhs * h * h))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivativeReport {
    /// `(1/N²) Σ_{i≠j} ∇g(xᵢ - xⱼ) · (u(xᵢ) - u(xⱼ))`.
    pub pair: f64,
    /// `-(2/N) Σ [u(xᵢ) · ∇(g∗ω)(xᵢ) - (∇g ∗· (uω))(xᵢ)]`.
    pub cross: f64,
    /// `2 ∫ u · ∇(g∗ω) ω`, zero in exact arithmetic.
    pub continuum: f64,
    pub total: f64,
}

/// The time derivative of `F_N^avg` along the coupled flow, written as the
/// off-diagonal integral of `∇g(x - y) · (u(x) - u(y))` against
/// `(ω_N - ω)^{⊗2}` with `u` the Euler velocity.
pub fn energy_derivative_rhs(state: &VortexState, field: &GridField) -> Result<DerivativeReport> {
    let mass = field.mass();
    if mass.abs() < 1e-12 {
        return Err(Error::Parameter("vorticity has zero mass; there is no velocity to test against".into()));
    }
    check_unit_mass(mass)?;
    let fp = FieldPotential::new(field)?;
    let n = state.n();
    let x = &state.positions;
    let mut u = Vec::with_capacity(n);
    let mut grad = Vec::with_capacity(n);
    for p in x {
        let gp = fp.gradient(*p)?;
        grad.push(gp);
        u.push(gp.perp());
    }
    let mut pair = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let d = x[i] - x[j];
            let r2 = d.norm2();
            if r2 < COLLISION_DISTANCE * COLLISION_DISTANCE {
                return Err(Error::Collision(r2.sqrt()));
            }
            pair += -(u[i] - u[j]).dot(d) / (TWO_PI * r2);
        }
    }
    let pair = 2.0 * pair / (n * n) as f64;

    // ∇g ∗· (uω) on the padded grid.
    let domain = field.domain;
    let m = domain.m;
    let mut u1w = GridField::zeros(domain);
    let mut u2w = GridField::zeros(domain);
    let mut continuum = 0.0;
    for iy in 0..m {
        for ix in 0..m {
            let w = field.values[iy * m + ix];
            let gp = fp.gradient_at_node(ix, iy);
            let v = gp.perp();
            u1w.values[iy * m + ix] = v.x1 * w;
            u2w.values[iy * m + ix] = v.x2 * w;
            continuum += v.dot(gp) * w;
        }
    }
    continuum *= 2.0 * field.cell_area();
    let mut solver = FreeSpaceSolver::new(domain, true);
    let s1 = solver.transform(&u1w);
    let s2 = solver.transform(&u2w);
    let a = solver.apply(&s1, true, |k1, _, gk| i_times(k1) * gk);
    let b = solver.apply(&s2, true, |_, k2, gk| i_times(k2) * gk);
    let div: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p + q).collect();
    let grid = UniformGrid { origin: solver.origin(), h: domain.h(), nx: solver.n(), ny: solver.n() };
    let mut cross = 0.0;
    for i in 0..n {
        let st = fp.stencil(x[i])?;
        let w = grid.apply(&div, &st);
        cross += u[i].dot(grad[i]) - w;
    }
    let cross = -2.0 * cross / n as f64;
    Ok(DerivativeReport { pair, cross, continuum, total: pair + cross + continuum })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{disk_patch, smooth_bump, DomainSpec};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn uniform_disk_sample(n: usize, radius: f64, seed: u64) -> VortexState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n).map(|_| Point2::polar(radius * rng.gen::<f64>().sqrt(), rng.gen_range(0.0..TWO_PI))).collect();
        VortexState::new(pts, 0.0).unwrap()
    }

    fn single(p: Point2) -> VortexState {
        VortexState::new(vec![p], 0.0).unwrap()
    }

    /// `(∬ g ωω, (g∗ω)(0))` for a radial profile, from the enclosed mass
    /// `m(r)`: `∫|∇ψ|² over B_R = ∫₀ᴿ m²/(2πr) dr`.
    fn radial_oracle(profile: impl Fn(f64) -> f64, r_max: f64) -> (f64, f64) {
        let k = 400_000;
        let dr = r_max / k as f64;
        let (mut mass, mut grad2, mut log_moment) = (0.0, 0.0, 0.0);
        let mut masses = Vec::with_capacity(k);
        for i in 0..k {
            let r = (i as f64 + 0.5) * dr;
            let dm = TWO_PI * profile(r) * r * dr;
            mass += dm;
            log_moment += r.ln() * dm;
            masses.push((r, mass - 0.5 * dm));
        }
        for (r, m) in &masses {
            grad2 += (m / mass).powi(2) / (TWO_PI * r) * dr;
        }
        (grad2 - r_max.ln() / TWO_PI, -log_moment / (mass * TWO_PI))
    }

    #[test]
    fn single_vortex_in_uniform_disk() {
        let d = DomainSpec::new(24.0, 512).unwrap();
        let disk = disk_patch(d, Point2::ZERO, 1.0, 2.0).unwrap();
        let w = 2.0 * d.h();
        let (energy, psi0) = radial_oracle(|r| 1.0 - crate::grid::smooth_step((r - 1.0 + w) / (2.0 * w)), 1.0 + w);
        let r = f_n_avg(&single(Point2::ZERO), &disk).unwrap();
        assert_eq!(r.pair_sum, 0.0);
        assert_relative_eq!(r.continuum, energy, max_relative = 5e-4);
        assert_relative_eq!(r.f_avg, energy - 2.0 * psi0, max_relative = 5e-4);
        // The sharp disk, for orientation.
        assert_relative_eq!(r.f_avg, -3.0 / (8.0 * PI), max_relative = 2e-2);
        let far = f_n_avg(&single(Point2::new(10.0, 0.0)), &disk).unwrap();
        assert_relative_eq!(far.f_avg, energy + 10f64.ln() / PI, max_relative = 5e-4);
        assert!(f_n_avg(&single(Point2::new(13.0, 0.0)), &disk).is_err());
    }

    #[test]
    fn report_scaling_and_json() {
        let d = DomainSpec::new(8.0, 64).unwrap();
        let f = smooth_bump(d, Point2::ZERO, 1.0, 6).unwrap();
        let s = uniform_disk_sample(7, 1.0, 3);
        let r = f_n_avg(&s, &f).unwrap();
        assert_eq!(r.f_n(), 49.0 * r.f_avg);
        assert_eq!(r.f_avg, r.pair_sum + r.cross + r.continuum);
        let json = r.to_json().unwrap();
        for key in ["pair_sum", "cross", "continuum", "f_avg", "renormalized", "\"n\"", "\"m\""] {
            assert!(json.contains(key), "{key}");
        }
        let mut heavy = f.clone();
        heavy.values.iter_mut().for_each(|v| *v *= 2.0);
        assert!(f_n_avg(&s, &heavy).is_err());
    }

    #[test]
    fn smeared_interaction_cases() {
        let gl = GaussLegendre::new(NonZeroUsize::new(32).unwrap());
        // Disjoint circles interact like points.
        assert_relative_eq!(smeared_interaction(1.0, 0.2, 0.3, &gl), g(1.0), max_relative = 1e-15);
        // Circle j inside disk i sees the capped value.
        assert_relative_eq!(smeared_interaction(0.1, 0.5, 0.2, &gl), g(0.5), max_relative = 1e-15);
        // Coincident circles reproduce the self-energy.
        assert_relative_eq!(smeared_interaction(1e-300, 0.3, 0.3, &gl), g(0.3), max_relative = 1e-12);
        // Partial overlap against brute-force angular quadrature.
        for (d, ei, ej) in [(0.3, 0.2, 0.25), (0.1, 0.2, 0.25), (0.45, 0.3, 0.2)] {
            let k = 200_000;
            let brute: f64 = (0..k)
                .map(|t| {
                    let th = TWO_PI * (t as f64 + 0.5) / k as f64;
                    let y = Point2::new(d, 0.0) + Point2::polar(ej, th);
                    g(y.norm().max(ei))
                })
                .sum::<f64>()
                / k as f64;
            assert_relative_eq!(smeared_interaction(d, ei, ej, &gl), brute, max_relative = 1e-8);
            // Symmetric in the two circles.
            assert_relative_eq!(smeared_interaction(d, ei, ej, &gl), smeared_interaction(d, ej, ei, &gl), max_relative = 1e-10);
        }
    }

    #[test]
    fn field_energy_of_centered_vortex_in_disk() {
        // H' = r/2πa² inside η, r/2πa² - 1/2πr on η < r < a, 0 outside:
        // ∫|∇H|² = (1/2π)(η²/a² - 3/4 + ln(a/η)).
        let d = DomainSpec::new(8.0, 512).unwrap();
        let a = 1.0;
        let disk = disk_patch(d, Point2::ZERO, a, 2.0).unwrap();
        for eta in [0.1, 0.3, 0.6] {
            let tv = TruncationVector::uniform(1, eta).unwrap();
            let e = h_field_energy(&single(Point2::ZERO), &disk, &tv, 32).unwrap();
            let exact = (eta * eta / (a * a) - 0.75 + (a / eta).ln()) / TWO_PI;
            assert_relative_eq!(e, exact, max_relative = 2e-3);
        }
    }

    #[test]
    fn matched_ring_cancels() {
        // The smeared vortex is the uniform measure on a circle; a thin ring
        // of vorticity on the same circle leaves almost nothing behind.
        let d = DomainSpec::new(8.0, 512).unwrap();
        let eta = 0.5;
        let energy = |width: f64| {
            let mut ring = GridField::from_fn(d, |p| (-((p.norm() - eta) / width).powi(2)).exp());
            ring.normalize_mass().unwrap();
            let tv = TruncationVector::uniform(1, eta).unwrap();
            h_field_energy(&single(Point2::ZERO), &ring, &tv, 32).unwrap()
        };
        let (wide, thin) = (energy(0.1), energy(0.05));
        assert!(thin < wide && thin < 0.02, "{wide} {thin}");
    }

    #[test]
    fn under_resolved_eta_is_rejected() {
        let d = DomainSpec::new(8.0, 64).unwrap();
        let f = smooth_bump(d, Point2::ZERO, 1.0, 6).unwrap();
        let tv = TruncationVector::uniform(1, 0.2).unwrap();
        assert!(matches!(h_field_energy(&single(Point2::ZERO), &f, &tv, 32), Err(Error::Resolution(_))));
        assert!(TruncationVector::new(vec![0.1, -1.0]).is_err());
    }

    #[test]
    fn renormalized_energy_approaches_modulated_energy() {
        let d = DomainSpec::new(4.0, 512).unwrap();
        let f = smooth_bump(d, Point2::ZERO, 1.0, 4).unwrap();
        let s = uniform_disk_sample(16, 0.9, 11);
        let mut errs = Vec::new();
        for eta in [0.1, 0.05, 0.025] {
            let tv = TruncationVector::uniform(16, eta).unwrap();
            let r = f_n_avg_renormalized(&s, &f, &tv, 32).unwrap();
            errs.push((r.renormalized.unwrap() - r.f_avg).abs() * 256.0);
        }
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
    }

    #[test]
    fn r_vector_examples() {
        let spread = VortexState::new(vec![Point2::ZERO, Point2::new(1.0, 0.0), Point2::new(0.0, 1.5)], 0.0).unwrap();
        assert_eq!(r_vector(&spread, 0.1).unwrap().as_slice(), &[0.1, 0.1, 0.1]);
        let close = VortexState::new(vec![Point2::ZERO, Point2::new(0.2, 0.0)], 0.0).unwrap();
        for r in r_vector(&close, 0.1).unwrap().as_slice() {
            assert_relative_eq!(*r, 0.05);
        }
        assert_eq!(r_vector(&single(Point2::ZERO), 0.1).unwrap().as_slice(), &[0.1]);
        assert!(r_vector(&close, 0.0).is_err());
    }

    #[test]
    fn close_pair_examples() {
        let far = VortexState::new(vec![Point2::ZERO, Point2::new(1.0, 0.0)], 0.0).unwrap();
        assert_eq!(count_close_pairs(&far, 0.5).unwrap(), 0);
        assert_eq!(close_pair_energy(&far, 0.5).unwrap(), 0.0);
        let tri = VortexState::new(vec![Point2::ZERO, Point2::new(0.01, 0.0), Point2::new(0.0, 0.01)], 0.0).unwrap();
        assert_eq!(count_close_pairs(&tri, 0.05).unwrap(), 6);
        let eps = 0.2;
        let pair = VortexState::new(vec![Point2::ZERO, Point2::new(eps / 2.0, 0.0)], 0.0).unwrap();
        assert_relative_eq!(close_pair_energy(&pair, eps).unwrap(), 2.0 * g(eps / 2.0));
        assert!(count_close_pairs(&pair, 0.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn close_pairs_match_brute_force(seed in 0u64..100_000, n in 1usize..300, eps in 0.001f64..0.5) {
            let s = uniform_disk_sample(n, 1.0, seed);
            let mut brute = 0;
            for i in 0..n {
                for j in 0..n {
                    if i != j && (s.positions[i] - s.positions[j]).norm() <= eps {
                        brute += 1;
                    }
                }
            }
            prop_assert_eq!(count_close_pairs(&s, eps).unwrap(), brute);
        }

        #[test]
        fn r_vector_is_capped(seed in 0u64..100_000, n in 2usize..60, eps in 0.001f64..0.5) {
            let s = uniform_disk_sample(n, 1.0, seed);
            let r = r_vector(&s, eps).unwrap();
            prop_assert!(r.as_slice().iter().all(|v| *v <= eps && *v > 0.0));
        }
    }

    #[test]
    fn field_transform_interpolation() {
        let d = DomainSpec::new(8.0, 64).unwrap();
        let f = smooth_bump(d, Point2::new(0.3, -0.2), 1.0, 6).unwrap();
        let fp = FieldPotential::new(&f).unwrap();
        let h2 = d.h() * d.h();
        for xi in [Point2::ZERO, Point2::new(0.37, -1.91), Point2::new(4.4, 2.05), Point2::new(-9.3, 0.6)] {
            let mut direct = Complex64::default();
            for iy in 0..64 {
                for ix in 0..64 {
                    let p = d.node(ix, iy);
                    direct += Complex64::from_polar(f.get(ix, iy) * h2, -p.dot(xi));
                }
            }
            assert!((fp.transform_at(xi) - direct).norm() < 1e-5, "{xi:?}");
        }
    }

    #[test]
    fn hs_two_diracs() {
        // Angular integral in closed form: (1/π) ∫ ⟨ρ⟩^{2s} (1 - J0(ρ d)) ρ dρ.
        let (x, y) = (Point2::new(0.3, -0.4), Point2::new(-0.5, 0.2));
        let s = -2.0;
        let a = single(x);
        let b = single(y);
        let cfg = HsConfig::new(s, default_freq_cut(8.0));
        let rep = hs_distance_between(&Measure::Empirical(&a), &Measure::Empirical(&b), &cfg).unwrap();
        let dist = (x - y).norm();
        let gl = GaussLegendre::new(NonZeroUsize::new(64).unwrap());
        let mut oracle = 0.0;
        let mut lo: f64 = 0.0;
        while lo < 2000.0 {
            let hi = lo + 0.5 * (1.0 + lo);
            oracle += gl.integrate(lo, hi, |r| (1.0 + r * r).powf(s) * (1.0 - libm::j0(r * dist)) * r);
            lo = hi;
        }
        oracle += 1.0 / (2.0 * lo * lo);
        oracle /= PI;
        assert_relative_eq!(rep.distance_sq, oracle, max_relative = 1e-4);
        assert!(!rep.truncated);
    }

    #[test]
    fn hs_identical_inputs_and_symmetry() {
        let d = DomainSpec::new(8.0, 64).unwrap();
        let s = uniform_disk_sample(20, 1.0, 4);
        let cfg = HsConfig::new(-2.0, default_freq_cut(8.0));
        let same = hs_distance_between(&Measure::Empirical(&s), &Measure::Empirical(&s), &cfg).unwrap();
        assert_eq!(same.distance, 0.0);
        let f1 = FieldPotential::new(&smooth_bump(d, Point2::ZERO, 1.0, 6).unwrap()).unwrap();
        let f2 = FieldPotential::new(&disk_patch(d, Point2::new(0.2, 0.0), 0.8, 2.0).unwrap()).unwrap();
        let ab = hs_distance_between(&Measure::Field(&f1), &Measure::Field(&f2), &cfg).unwrap();
        let ba = hs_distance_between(&Measure::Field(&f2), &Measure::Field(&f1), &cfg).unwrap();
        assert_eq!(ab.distance, ba.distance);
        assert!(ab.distance > 0.0);
        assert_eq!(hs_distance_between(&Measure::Field(&f1), &Measure::Field(&f1), &cfg).unwrap().distance, 0.0);
        assert!(hs_distance_between(&Measure::Field(&f1), &Measure::Field(&f2), &HsConfig::new(-1.0, 10.0)).is_err());
    }

    #[test]
    fn hs_decreases_with_sample_size() {
        let d = DomainSpec::new(8.0, 64).unwrap();
        let f = disk_patch(d, Point2::ZERO, 1.0, 2.0).unwrap();
        let dist = |n: usize| -> f64 {
            (0..4).map(|seed| hs_distance(&uniform_disk_sample(n, 1.0, seed), &f, -2.0, default_freq_cut(8.0)).unwrap().distance).sum::<f64>()
        };
        assert!(dist(256) < dist(32));
    }

    fn compact_field(d: DomainSpec, f: impl Fn(Point2) -> Point2) -> SampledVectorField {
        let cutoff = |p: Point2| {
            let s = 1.0 - p.norm2() / 9.0;
            if s > 0.0 {
                s.powi(4)
            } else {
                0.0
            }
        };
        SampledVectorField::from_fn(d.node(0, 0), d.h(), d.m, d.m, |p| f(p) * cutoff(p))
    }

    #[test]
    fn stress_energy_identity() {
        let d = DomainSpec::new(8.0, 128).unwrap();
        let bump = smooth_bump(d, Point2::new(0.1, 0.0), 1.0, 8).unwrap();
        let constant = SampledVectorField::from_fn(d.node(0, 0), d.h(), d.m, d.m, |_| Point2::new(0.3, -1.0));
        let (l, r) = se_divergence_check(&constant, &bump, &bump).unwrap();
        assert!(l.abs() < 1e-12 && r.abs() < 1e-12, "{l} {r}");
        let rot = SampledVectorField::from_fn(d.node(0, 0), d.h(), d.m, d.m, |p| p.perp());
        let (l, r) = se_divergence_check(&rot, &bump, &bump).unwrap();
        assert!(l.abs() < 1e-10 && r.abs() < 1e-10, "{l} {r}");
        let v = compact_field(d, |p| Point2::new((1.3 * p.x2).sin() + p.x1, p.x1 * p.x1 - 0.5 * p.x2));
        let (l, r) = se_divergence_check(&v, &bump, &bump).unwrap();
        assert_relative_eq!(l, r, max_relative = 2e-2);
    }

    #[test]
    fn stress_energy_rejects_jumps() {
        let d = DomainSpec::new(8.0, 64).unwrap();
        let bump = smooth_bump(d, Point2::ZERO, 1.0, 8).unwrap();
        let step = SampledVectorField::from_fn(d.node(0, 0), d.h(), d.m, d.m, |p| {
            Point2::new(if p.x1 > 0.01 { 1.0 } else { 0.0 }, 0.0)
        });
        assert!(matches!(se_divergence_check(&step, &bump, &bump), Err(Error::Parameter(_))));
    }

    #[test]
    fn derivative_vanishes_for_symmetric_ring() {
        let d = DomainSpec::new(8.0, 128).unwrap();
        let f = smooth_bump(d, Point2::ZERO, 1.5, 6).unwrap();
        let pts = (0..12).map(|k| Point2::polar(0.7, TWO_PI * k as f64 / 12.0)).collect();
        let s = VortexState::new(pts, 0.0).unwrap();
        let r = energy_derivative_rhs(&s, &f).unwrap();
        assert!(r.total.abs() < 1e-9, "{r:?}");
        assert!(r.continuum.abs() < 1e-10);
        assert!(matches!(energy_derivative_rhs(&s, &GridField::zeros(d)), Err(Error::Parameter(_))));
    }

    #[test]
    fn derivative_is_label_invariant() {
        let d = DomainSpec::new(8.0, 64).unwrap();
        let f = smooth_bump(d, Point2::new(0.2, 0.1), 1.2, 6).unwrap();
        let s = uniform_disk_sample(9, 1.0, 2);
        let mut rev = s.clone();
        rev.positions.reverse();
        let a = energy_derivative_rhs(&s, &f).unwrap().total;
        let b = energy_derivative_rhs(&rev, &f).unwrap().total;
        assert_relative_eq!(a, b, max_relative = 1e-10, epsilon = 1e-14);
    }
}
