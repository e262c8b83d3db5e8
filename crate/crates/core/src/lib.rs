//! Optimal trade execution under fast mean-reverting stochastic price impact
//! with Ornstein-Uhlenbeck trading signals.
//!
//! The crate provides, in dependency order:
//! - [`model`]: problem/impact/signal parameter containers and validation;
//! - [`riccati`]: the backward Riccati ODE for the zero-order value coefficient;
//! - [`signal`]: closed-form signal integrals (Phi0/Phi1/Phi2, C1, V_eps) and
//!   the zero-order value functions;
//! - [`strategy`]: the AC, trading-signal, and first-order-corrected policies;
//! - [`sim`]: Monte Carlo evaluation with common random numbers;
//! - [`calibrate`]: kappa polynomial fits and OU estimation of (eps, beta);
//! - [`pdeverify`]: finite-difference verification of the asymptotic accuracy;
//! - [`cli`]: the command-line front end.

pub mod calibrate;
pub mod cli;
pub mod error;
pub mod model;
pub mod pdeverify;
pub mod riccati;
pub mod signal;
pub mod sim;
pub mod strategy;

pub use error::{Error, Result};
