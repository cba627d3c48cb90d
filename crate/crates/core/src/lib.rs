//! Point-vortex approximation of the 2D Euler equations: the mean-field
//! vortex system, a free-space vorticity solver, the modulated energy between
//! the two, and the quantitative bounds that control it.

pub mod bounds;
pub mod dynamics;
pub mod energy;
pub mod error;
pub mod experiments;
pub mod euler;
pub mod fit;
pub mod grid;
pub mod interp;
pub mod kernel;
pub mod spectral;

pub use error::{Error, Result};
pub use kernel::Point2;
