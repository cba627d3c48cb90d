//! Uniform grids on the square `[-L/2, L/2)²` and scalar fields sampled on them.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::Point2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    /// Side length `L` of the box centered at the origin.
    pub extent: f64,
    /// Grid points per side.
    pub m: usize,
}

impl DomainSpec {
    pub fn new(extent: f64, m: usize) -> Result<Self> {
        if !(extent > 0.0) || !extent.is_finite() {
            return Err(Error::Parameter(format!("extent must be positive, got {extent}")));
        }
        if m < 8 || !m.is_power_of_two() {
            return Err(Error::Parameter(format!("m must be a power of two >= 8, got {m}")));
        }
        Ok(DomainSpec { extent, m })
    }

    pub fn h(&self) -> f64 {
        self.extent / self.m as f64
    }

    pub fn coord(&self, j: usize) -> f64 {
        -0.5 * self.extent + j as f64 * self.h()
    }

    /// Node `(ix, iy)`; `ix` runs along the first coordinate.
    pub fn node(&self, ix: usize, iy: usize) -> Point2 {
        Point2::new(self.coord(ix), self.coord(iy))
    }

    /// Radius of the disk on which free-space quantities are trusted.
    pub fn trusted_radius(&self) -> f64 {
        0.25 * self.extent
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    /// Row-major, `values[iy * m + ix]`.
    pub values: Vec<f64>,
    pub domain: DomainSpec,
    pub t: f64,
}

impl GridField {
    pub fn zeros(domain: DomainSpec) -> Self {
        GridField { values: vec![0.0; domain.m * domain.m], domain, t: 0.0 }
    }

    pub fn from_fn(domain: DomainSpec, f: impl Fn(Point2) -> f64) -> Self {
        let m = domain.m;
        let mut values = Vec::with_capacity(m * m);
        for iy in 0..m {
            for ix in 0..m {
                values.push(f(domain.node(ix, iy)));
            }
        }
        GridField { values, domain, t: 0.0 }
    }

    pub fn m(&self) -> usize {
        self.domain.m
    }

    pub fn h(&self) -> f64 {
        self.domain.h()
    }

    pub fn get(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.domain.m + ix]
    }

    pub fn cell_area(&self) -> f64 {
        self.h() * self.h()
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.cell_area()
    }

    pub fn l2_norm(&self) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() * self.cell_area()).sqrt()
    }

    pub fn linf_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `‖ω‖_{L^p}` by grid quadrature; `p = ∞` gives the sup norm.
    pub fn lp_norm(&self, p: f64) -> f64 {
        if p.is_infinite() {
            return self.linf_norm();
        }
        (self.values.iter().map(|v| v.abs().powf(p)).sum::<f64>() * self.cell_area()).powf(1.0 / p)
    }

    /// `∫ f ω` by grid quadrature.
    pub fn integrate(&self, f: impl Fn(Point2) -> f64) -> f64 {
        let m = self.m();
        let mut s = 0.0;
        for iy in 0..m {
            for ix in 0..m {
                let v = self.values[iy * m + ix];
                if v != 0.0 {
                    s += v * f(self.domain.node(ix, iy));
                }
            }
        }
        s * self.cell_area()
    }

    /// `∫ ln⟨x⟩ ω dx` with `⟨x⟩ = (1 + |x|²)^{1/2}`.
    pub fn log_moment(&self) -> f64 {
        self.integrate(|p| 0.5 * (1.0 + p.norm2()).ln())
    }

    pub fn is_nonnegative(&self) -> bool {
        self.values.iter().all(|v| *v >= 0.0)
    }

    /// Largest `|x|` over nodes where `|ω|` exceeds `rel_threshold · ‖ω‖_∞`.
    pub fn support_radius(&self, rel_threshold: f64) -> f64 {
        let cut = rel_threshold * self.linf_norm();
        let m = self.m();
        let mut r: f64 = 0.0;
        for iy in 0..m {
            for ix in 0..m {
                if self.values[iy * m + ix].abs() > cut {
                    r = r.max(self.domain.node(ix, iy).norm());
                }
            }
        }
        r
    }

    /// Share of `∫|ω|` carried by nodes with `|x| > r`.
    pub fn abs_mass_fraction_outside(&self, r: f64) -> f64 {
        let m = self.m();
        let (mut total, mut outside) = (0.0, 0.0);
        for iy in 0..m {
            for ix in 0..m {
                let v = self.values[iy * m + ix].abs();
                total += v;
                if self.domain.node(ix, iy).norm() > r {
                    outside += v;
                }
            }
        }
        if total > 0.0 {
            outside / total
        } else {
            0.0
        }
    }

    /// Rescale to unit grid mass.
    pub fn normalize_mass(&mut self) -> Result<()> {
        let mass = self.mass();
        if !(mass.abs() > 0.0) || !mass.is_finite() {
            return Err(Error::Parameter(format!("cannot normalize field of mass {mass}")));
        }
        self.values.iter_mut().for_each(|v| *v /= mass);
        Ok(())
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric("grid field has non-finite entries".into()))
        }
    }

    /// Header (L: f64, m: u64, t: f64) followed by the values, all
    /// little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 8 * self.values.len());
        out.extend_from_slice(&self.domain.extent.to_le_bytes());
        out.extend_from_slice(&(self.domain.m as u64).to_le_bytes());
        out.extend_from_slice(&self.t.to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let word = |k: usize| -> Result<[u8; 8]> {
            bytes
                .get(8 * k..8 * k + 8)
                .map(|s| s.try_into().expect("slice of length 8"))
                .ok_or_else(|| Error::Config("truncated grid field file".into()))
        };
        let extent = f64::from_le_bytes(word(0)?);
        let m = u64::from_le_bytes(word(1)?) as usize;
        let t = f64::from_le_bytes(word(2)?);
        let domain = DomainSpec::new(extent, m).map_err(|e| Error::Config(e.to_string()))?;
        if bytes.len() != 24 + 8 * m * m {
            return Err(Error::Config(format!(
                "grid field file has {} bytes, expected {}",
                bytes.len(),
                24 + 8 * m * m
            )));
        }
        let values = (0..m * m).map(|k| word(3 + k).map(f64::from_le_bytes)).collect::<Result<Vec<_>>>()?;
        let field = GridField { values, domain, t };
        field.check_finite()?;
        Ok(field)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// `(1 - |x - c|²/R²)^p` inside the disk, normalized to unit grid mass.
pub fn smooth_bump(domain: DomainSpec, center: Point2, radius: f64, power: i32) -> Result<GridField> {
    if !(radius > 0.0) {
        return Err(Error::Parameter(format!("radius must be positive, got {radius}")));
    }
    let mut f = GridField::from_fn(domain, |p| {
        let s = 1.0 - (p - center).norm2() / (radius * radius);
        if s > 0.0 {
            s.powi(power)
        } else {
            0.0
        }
    });
    f.normalize_mass()?;
    Ok(f)
}

pub(crate) fn smooth_step(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t >= 1.0 {
        1.0
    } else {
        let a = (-1.0 / t).exp();
        let b = (-1.0 / (1.0 - t)).exp();
        a / (a + b)
    }
}

/// Indicator of the disk `B(center, radius)` with its edge smoothed over
/// `±smoothing_cells` grid cells by a C^∞ step, normalized to unit grid mass.
pub fn disk_patch(domain: DomainSpec, center: Point2, radius: f64, smoothing_cells: f64) -> Result<GridField> {
    if !(radius > 0.0) {
        return Err(Error::Parameter(format!("radius must be positive, got {radius}")));
    }
    let w = smoothing_cells * domain.h();
    let mut f = GridField::from_fn(domain, |p| {
        let r = (p - center).norm();
        if w <= 0.0 {
            return if r < radius { 1.0 } else { 0.0 };
        }
        1.0 - smooth_step((r - radius + w) / (2.0 * w))
    });
    f.normalize_mass()?;
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn domain_validation() {
        assert!(DomainSpec::new(8.0, 100).is_err());
        assert!(DomainSpec::new(-1.0, 64).is_err());
        let d = DomainSpec::new(8.0, 64).unwrap();
        assert_eq!(d.coord(0), -4.0);
        assert_eq!(d.coord(32), 0.0);
    }

    #[test]
    fn profiles_have_unit_mass() {
        let d = DomainSpec::new(8.0, 128).unwrap();
        let b = smooth_bump(d, Point2::ZERO, 1.0, 8).unwrap();
        assert_relative_eq!(b.mass(), 1.0, epsilon = 1e-12);
        // Continuous normalization is (p+1)/(πR²) at the peak.
        assert_relative_eq!(b.max(), 9.0 / std::f64::consts::PI, max_relative = 1e-8);
        let p = disk_patch(d, Point2::ZERO, 1.0, 2.0).unwrap();
        assert_relative_eq!(p.mass(), 1.0, epsilon = 1e-12);
        assert!(p.is_nonnegative());
        assert!(p.support_radius(1e-14) <= 1.0 + 2.0 * d.h() + 1e-12);
    }

    #[test]
    fn binary_round_trip() {
        let d = DomainSpec::new(4.0, 16).unwrap();
        let mut f = GridField::from_fn(d, |p| p.x1 - 2.0 * p.x2);
        f.t = 0.75;
        let bytes = f.to_bytes();
        assert_eq!(bytes.len(), 24 + 8 * 256);
        assert_eq!(&bytes[0..8], &4.0f64.to_le_bytes());
        assert_eq!(&bytes[8..16], &16u64.to_le_bytes());
        let g = GridField::from_bytes(&bytes).unwrap();
        assert_eq!(f, g);
        assert!(GridField::from_bytes(&bytes[..100]).is_err());
    }

    #[test]
    fn log_moment_of_disk() {
        let d = DomainSpec::new(8.0, 256).unwrap();
        let p = disk_patch(d, Point2::ZERO, 1.0, 2.0).unwrap();
        let lm = p.log_moment();
        // Uniform unit disk: ∫₀¹ ln(1+r²) r dr = ln 2 - 1/2.
        assert!(lm > 0.0 && lm < 0.5 * 2f64.ln());
        assert_relative_eq!(lm, 2f64.ln() - 0.5, max_relative = 2e-2);
        let narrow = smooth_bump(d, Point2::ZERO, 0.1, 8).unwrap();
        assert!(narrow.log_moment() < 1e-3);
    }
}
