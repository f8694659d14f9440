//! Parisi functionals and thresholds, the interpolation formulas for
//! tree-correlated ensembles, and the increasify tree constructions.

mod cascade;
mod increasify;
mod multidim;
mod pde;
mod spherical;
mod zeta;

pub use cascade::*;
pub use increasify::*;
pub use multidim::*;
pub use pde::*;
pub use spherical::*;
pub use zeta::*;
