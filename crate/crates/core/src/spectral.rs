//! 2D FFTs and the free-space Coulomb convolution on a square grid.
//!
//! The free-space solve uses the truncated-kernel trick: the Coulomb kernel
//! cut off at radius `R` has the closed-form transform
//! `(1 - J0(kR))/k² - R ln R · J1(kR)/k`, and if the box period exceeds
//! `R` plus the source diameter, periodic convolution with the cut-off kernel
//! equals free-space convolution with `g` on the region of interest. No image
//! vortices, no zero-mean correction.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::grid::{DomainSpec, GridField};
use crate::kernel::{Point2, TWO_PI};

/// In-place `n × n` complex FFT, row-major.
pub struct Fft2 {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
}

impl Fft2 {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let len = fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len());
        Fft2 { n, fwd, inv, scratch: vec![Complex64::default(); len] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn transpose(&self, data: &mut [Complex64]) {
        let n = self.n;
        for i in 0..n {
            for j in i + 1..n {
                data.swap(i * n + j, j * n + i);
            }
        }
    }

    /// Unnormalized forward transform `Σ f e^{-2πi k·j/n}`.
    pub fn forward(&mut self, data: &mut [Complex64]) {
        self.run(data, false);
    }

    /// Inverse transform including the `1/n²` factor.
    pub fn inverse(&mut self, data: &mut [Complex64]) {
        self.run(data, true);
        let s = 1.0 / (self.n * self.n) as f64;
        data.iter_mut().for_each(|c| *c *= s);
    }

    fn run(&mut self, data: &mut [Complex64], inverse: bool) {
        assert_eq!(data.len(), self.n * self.n);
        let plan = if inverse { self.inv.clone() } else { self.fwd.clone() };
        plan.process_with_scratch(data, &mut self.scratch);
        self.transpose(data);
        plan.process_with_scratch(data, &mut self.scratch);
        self.transpose(data);
    }
}

/// Signed DFT index of position `j` on an `n`-point axis.
pub fn signed_index(j: usize, n: usize) -> i64 {
    if j <= n / 2 {
        j as i64
    } else {
        j as i64 - n as i64
    }
}

/// Fourier transform of `g · 1_{|x| < R}` at radial frequency `k`.
pub fn truncated_kernel_hat(k: f64, r: f64) -> f64 {
    let x = k * r;
    let lnr = r.ln();
    if x < 1e-3 {
        let x2 = x * x;
        r * r / 4.0 * (1.0 - x2 / 16.0) - r * lnr * (r / 2.0) * (1.0 - x2 / 8.0)
    } else {
        (1.0 - libm::j0(x)) / (k * k) - r * lnr * libm::j1(x) / k
    }
}

/// `Ĝ` on the tensor grid of wavenumbers `k`, row-major.
pub(crate) fn kernel_table(k: &[f64], cutoff: f64) -> Vec<f64> {
    let n = k.len();
    let mut kernel = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            let kk = k[a].hypot(k[b]);
            kernel[a * n + b] = if kk == 0.0 {
                cutoff * cutoff / 4.0 - cutoff * cutoff * cutoff.ln() / 2.0
            } else {
                truncated_kernel_hat(kk, cutoff)
            };
        }
    }
    kernel
}

/// Free-space Coulomb convolution for fields on `domain`.
///
/// With `padded = false` the transform grid is the field grid itself
/// (period `L`, cutoff `L/2`); results are exact on `B(0, L/4)` for sources
/// in `B(0, L/4)`. With `padded = true` the grid is doubled (period `2L`,
/// cutoff `L/√2 + L/4`) and results are exact on the whole original box.
pub struct FreeSpaceSolver {
    domain: DomainSpec,
    n: usize,
    period: f64,
    offset: usize,
    kernel: Vec<f64>,
    k: Vec<f64>,
    fft: Fft2,
}

impl FreeSpaceSolver {
    pub fn new(domain: DomainSpec, padded: bool) -> Self {
        let m = domain.m;
        let l = domain.extent;
        let (n, period, cutoff) = if padded {
            (2 * m, 2.0 * l, l / 2f64.sqrt() + 0.25 * l)
        } else {
            (m, l, 0.5 * l)
        };
        let k: Vec<f64> = (0..n).map(|j| TWO_PI * signed_index(j, n) as f64 / period).collect();
        let kernel = kernel_table(&k, cutoff);
        FreeSpaceSolver {
            domain,
            n,
            period,
            offset: (n - m) / 2,
            kernel,
            k,
            fft: Fft2::new(n),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    /// Wavenumbers along one axis in FFT order.
    pub fn wavenumbers(&self) -> &[f64] {
        &self.k
    }

    /// Physical position of the transform grid's first node.
    pub fn origin(&self) -> Point2 {
        let c = -0.5 * self.period;
        Point2::new(c, c)
    }

    /// Forward DFT of the field embedded in the transform grid.
    pub fn transform(&mut self, field: &GridField) -> Vec<Complex64> {
        assert_eq!(field.domain, self.domain, "field lives on a different domain");
        let (n, m, o) = (self.n, self.domain.m, self.offset);
        let mut data = vec![Complex64::default(); n * n];
        for iy in 0..m {
            for ix in 0..m {
                data[(iy + o) * n + ix + o] = Complex64::new(field.values[iy * m + ix], 0.0);
            }
        }
        self.fft.forward(&mut data);
        data
    }

    /// Applies a spectral multiplier built from `(k1, k2, Ĝ)` to a transformed
    /// field and returns the real part of the inverse transform on the full
    /// transform grid.
    ///
    /// Odd-order derivatives have no consistent Nyquist mode; pass `odd` to
    /// drop it.
    pub fn apply(&mut self, spectrum: &[Complex64], odd: bool, mult: impl Fn(f64, f64, f64) -> Complex64) -> Vec<f64> {
        let n = self.n;
        let mut data = vec![Complex64::default(); n * n];
        for a in 0..n {
            for b in 0..n {
                let idx = a * n + b;
                data[idx] = spectrum[idx] * mult(self.k[b], self.k[a], self.kernel[idx]);
            }
        }
        if odd {
            zero_nyquist(&mut data, n);
        }
        self.fft.inverse(&mut data);
        data.iter().map(|c| c.re).collect()
    }

    /// Restricts a transform-grid array to the original field grid.
    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        let (n, m, o) = (self.n, self.domain.m, self.offset);
        let mut out = Vec::with_capacity(m * m);
        for iy in 0..m {
            out.extend_from_slice(&full[(iy + o) * n + o..(iy + o) * n + o + m]);
        }
        out
    }
}

pub(crate) fn i_times(k: f64) -> Complex64 {
    Complex64::new(0.0, k)
}

pub(crate) fn zero_nyquist(data: &mut [Complex64], n: usize) {
    let nyq = n / 2;
    for j in 0..n {
        data[nyq * n + j] = Complex64::default();
        data[j * n + nyq] = Complex64::default();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn fft_round_trip() {
        let n = 16;
        let mut fft = Fft2::new(n);
        let orig: Vec<Complex64> = (0..n * n).map(|i| Complex64::new((i as f64).sin(), (i as f64 * 0.3).cos())).collect();
        let mut data = orig.clone();
        fft.forward(&mut data);
        fft.inverse(&mut data);
        for (a, b) in data.iter().zip(&orig) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn kernel_hat_matches_radial_quadrature() {
        // Ĝ(k) = -∫₀ᴿ r ln r J0(kr) dr, by composite Gauss-Legendre on a
        // graded mesh to handle the log at r = 0.
        let r_cut = 3.0;
        for k in [0.0005, 0.3, 2.0, 11.0] {
            let mut s = 0.0;
            let nodes = [
                (-0.906_179_845_938_664, 0.236_926_885_056_189),
                (-0.538_469_310_105_683, 0.478_628_670_499_366),
                (0.0, 0.568_888_888_888_889),
                (0.538_469_310_105_683, 0.478_628_670_499_366),
                (0.906_179_845_938_664, 0.236_926_885_056_189),
            ];
            let mut edges = vec![0.0];
            let mut e = 1e-12;
            while e < 0.01 {
                edges.push(e);
                e *= 2.0;
            }
            let steps = 4000;
            for i in 0..=steps {
                edges.push(0.01 + (r_cut - 0.01) * i as f64 / steps as f64);
            }
            for w in edges.windows(2) {
                let (a, b) = (w[0], w[1]);
                for (x, wt) in nodes {
                    let r = 0.5 * (a + b) + 0.5 * (b - a) * x;
                    s += 0.5 * (b - a) * wt * (-r * r.ln() * libm::j0(k * r));
                }
            }
            assert_relative_eq!(truncated_kernel_hat(k, r_cut), s, max_relative = 1e-9);
        }
    }

    #[test]
    fn potential_of_gaussian() {
        // g * ω for ω = e^{-r²/2σ²}/(2πσ²): ψ(r) = -(ln r + E1(r²/2σ²)/2)/2π.
        let domain = DomainSpec::new(8.0, 128).unwrap();
        let s2: f64 = 0.09;
        let field = GridField::from_fn(domain, |p| (-p.norm2() / (2.0 * s2)).exp() / (TWO_PI * s2));
        for padded in [false, true] {
            let mut solver = FreeSpaceSolver::new(domain, padded);
            let spec = solver.transform(&field);
            let psi = solver.apply(&spec, false, |_, _, g| Complex64::new(g, 0.0));
            let psi = solver.restrict(&psi);
            let r_max = if padded { 3.9 } else { 2.0 };
            for iy in (0..128).step_by(7) {
                for ix in (0..128).step_by(5) {
                    let p = domain.node(ix, iy);
                    let r = p.norm();
                    if r > r_max || r < 1e-9 {
                        continue;
                    }
                    let exact = -(r.ln() + 0.5 * e1(r * r / (2.0 * s2))) / TWO_PI;
                    assert!((psi[iy * 128 + ix] - exact).abs() < 1e-9, "padded {padded} r {r}");
                }
            }
        }
    }

    // Exponential integral E1 by series / continued fraction.
    fn e1(x: f64) -> f64 {
        if x < 1.0 {
            let mut sum = -0.577_215_664_901_532_9 - x.ln();
            let mut term = 1.0;
            for k in 1..60 {
                term *= -x / k as f64;
                sum -= term / k as f64;
            }
            sum
        } else {
            let mut f = 0.0;
            for k in (1..300).rev() {
                let k = k as f64;
                f = k * k / (x + 2.0 * k + 1.0 - f);
            }
            (-x).exp() / (x + 1.0 - f)
        }
    }
}
