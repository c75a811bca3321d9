//! Numerical toolkit for fractional powers of the heat operator `∂t − div(A∇)`.
//!
//! The crate is organised bottom-up:
//!
//! * [`grid`], [`coefficients`], [`elliptic`], [`spectral`]: spatial discretization,
//!   eigenbasis and heat semigroup.
//! * [`spacetime`], [`fractional`], [`balakrishnan`]: time-frequency transforms and the
//!   spectral calculus for `H^s` and its adjoint.
//! * [`special`], [`quadrature`], [`extension`]: Bessel functions, quadrature rules and the
//!   extension problem in the extra variable `z`.
//! * [`forward`], [`krylov`]: Galerkin solver for the initial-exterior problem.
//! * [`calderon`]: DN map, integral identities, Runge approximation and recovery.
//! * [`lab`]: numeric checks of weight functions and inequalities.
//! * [`io`]: configuration, caching, reports and experiment pipelines.

pub mod balakrishnan;
pub mod calderon;
pub mod coefficients;
pub mod elliptic;
pub mod error;
pub mod extension;
pub mod forward;
pub mod fractional;
pub mod grid;
pub mod io;
pub mod krylov;
pub mod lab;
pub mod quadrature;
pub mod spacetime;
pub mod special;
pub mod spectral;

pub use error::{Error, Result};
pub use num_complex::Complex64;
