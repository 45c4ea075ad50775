//! Equilibrium 2D Ising cooling trajectories, exact Onsager analytics, and a
//! latent flow pipeline whose steps are thermal transitions between
//! prescribed inverse temperatures.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod flow;
pub mod lattice;
pub mod montecarlo;
pub mod nn;
pub mod onsager;
pub mod quadrature;
pub mod run;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Coupling parameters in double precision.
pub type Couplings = lattice::CouplingParams<f64>;
/// Anisotropic reduced couplings in double precision.
pub type Couplings2d = onsager::AnisotropicCouplings<f64>;
/// Double-precision network, the default for every trained component.
pub type Mlp64 = nn::Mlp<f64>;
/// Single-precision network.
pub type Mlp32 = nn::Mlp<f32>;
