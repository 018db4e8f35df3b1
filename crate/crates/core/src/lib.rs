//! Numerical core for sparse reduced-order models of the Kuramoto-Sivashinsky
//! equation: spectral simulation, modal bases, quadratic Galerkin models,
//! causation-entropy structure identification, maximum-likelihood fitting,
//! ensemble Kalman-Bucy assimilation and statistical diagnostics.

pub mod basis;
pub mod causal;
pub mod derivative;
pub mod diagnostics;
pub mod enkbf;
pub mod error;
pub mod galerkin;
pub mod kse;
pub mod library;
pub mod linalg;
pub mod mle;
pub mod registry;
pub mod selection;

pub use error::{Error, Result};
