//! Numerical sub-Riemannian geometry on Carnot groups.
//!
//! The crate computes normal geodesics, pointed distances, horizontal
//! gradients and their divergences, and uses them to estimate measure
//! contraction constants `MCP(0, N)`:
//!
//! * [`model`]: Carnot groups from structure constants (BCH group law,
//!   polynomial left-invariant frames, dilations) and distribution checks.
//! * [`hamiltonian`]: normal extremals, exponential map and its Jacobian.
//! * [`distance`]: multistart shooting, smooth-point classification,
//!   gradients and divergences of `f = d²/2`.
//! * [`endpoint`]: controls, the end-point map and its differential,
//!   singular controls and semiconcavity support probes.
//! * [`mcp`]: interpolation, contraction flows, Monte-Carlo volume checks and
//!   sphere-based estimates of `N`.
//!
//! Algebraic objects are generic over a [`scalar::Coeff`] (rationals by
//! default); numerics are generic over [`scalar::Real`] (`f32`/`f64`).

pub mod algebra;
pub mod cache;
pub mod distance;
pub mod endpoint;
pub mod error;
pub mod frame;
pub mod hamiltonian;
pub mod mcp;
pub mod model;
pub mod ode;
pub mod poly;
pub mod sampling;
pub mod scalar;

pub use algebra::{GroupSpec, MediumFat, StratifiedAlgebra};
pub use distance::{Classification, DistanceCache, DistanceResult, ShootingOptions};
pub use error::{Error, Result};
pub use frame::{ChartFrame, Frame, PolyFrame};
pub use model::{CarnotModel, GroupPoint};
pub use scalar::{Coeff, Real};

/// Exact coefficients used for structure constants and BCH terms.
pub type Rational = num_rational::Rational64;

/// Algebra with exact rational structure constants.
pub type Algebra = StratifiedAlgebra<Rational>;
/// Double-precision Carnot model.
pub type Model = CarnotModel<f64>;
/// Single-precision Carnot model.
pub type Model32 = CarnotModel<f32>;
