//! Numerical machinery for exponential damping in the 1D periodic
//! Vlasov–Poisson system: dispersion analysis, the linearized Volterra
//! evolution, the Green kernel of the problem linearized at t = ∞, and the
//! nonlinear fixed point built on top of it.

pub mod cli;
pub mod dispersion;
pub mod equilibria;
pub mod error;
pub mod freestream;
pub mod green_function;
pub mod linear_dynamics;
pub mod nonlinear;
pub mod numerics;

pub use error::{Error, Result};
pub use num_complex::Complex64 as C64;
