//! Local Lagrange interpolation on uniform grids.

use crate::kernel::Point2;

pub const STENCIL: usize = 8;
const HALF: i64 = (STENCIL as i64) / 2 - 1;

/// A scalar array sampled on an `nx × ny` uniform grid, row-major.
#[derive(Debug, Clone, Copy)]
pub struct UniformGrid {
    pub origin: Point2,
    pub h: f64,
    pub nx: usize,
    pub ny: usize,
}

/// Stencil position and tensor weights for one evaluation point. Reusable
/// across arrays sampled on the same grid.
#[derive(Debug, Clone, Copy)]
pub struct Stencil {
    pub ix: usize,
    pub iy: usize,
    pub wx: [f64; STENCIL],
    pub wy: [f64; STENCIL],
}

fn weights(t: f64) -> [f64; STENCIL] {
    let mut w = [0.0; STENCIL];
    for (j, wj) in w.iter_mut().enumerate() {
        let mut num = 1.0;
        let mut den = 1.0;
        for k in 0..STENCIL {
            if k != j {
                num *= t - k as f64;
                den *= j as f64 - k as f64;
            }
        }
        *wj = num / den;
    }
    w
}

impl UniformGrid {
    /// Stencil for `p`, or `None` when the 8-point stencil leaves the grid.
    pub fn stencil(&self, p: Point2) -> Option<Stencil> {
        let fx = (p.x1 - self.origin.x1) / self.h;
        let fy = (p.x2 - self.origin.x2) / self.h;
        if !fx.is_finite() || !fy.is_finite() {
            return None;
        }
        let ix = fx.floor() as i64 - HALF;
        let iy = fy.floor() as i64 - HALF;
        let last = STENCIL as i64 - 1;
        if ix < 0 || iy < 0 || ix + last >= self.nx as i64 || iy + last >= self.ny as i64 {
            return None;
        }
        Some(Stencil {
            ix: ix as usize,
            iy: iy as usize,
            wx: weights(fx - ix as f64),
            wy: weights(fy - iy as f64),
        })
    }

    pub fn apply(&self, data: &[f64], s: &Stencil) -> f64 {
        let mut acc = 0.0;
        for a in 0..STENCIL {
            let row = &data[(s.iy + a) * self.nx + s.ix..(s.iy + a) * self.nx + s.ix + STENCIL];
            let mut r = 0.0;
            for b in 0..STENCIL {
                r += s.wx[b] * row[b];
            }
            acc += s.wy[a] * r;
        }
        acc
    }
}
