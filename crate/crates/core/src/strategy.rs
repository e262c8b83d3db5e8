//! The three trading-rate policies (Almgren-Chriss, trading-signal, and the
//! first-order FMR correction) plus the first-order value approximation.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{h0_zero_order, h1_zero_order, StrategyTables};

/// Which policy drives the trading rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Signal-blind quadratic liquidation, nu = X0 q / kappa.
    Ac,
    /// Adds the signal tilt h0^(1) / 2 kappa.
    Ts,
    /// TS plus the V_eps . C1 correction, optionally modulated by (1 + eta(y)).
    FirstOrder { apply_impact_modulation: bool },
}

/// nu^AC(t, q) = X0(t) q / kappa(t).
pub fn nu_ac(tables: &StrategyTables, t: f64, q: f64) -> f64 {
    tables.chi_at(t) * q / tables.kappa_at(t)
}

/// nu^TS(t, mu, q) = (X0(t) q + h0^(1)(t, mu) / 2) / kappa(t).
pub fn nu_ts(tables: &StrategyTables, t: f64, mu: &DVector<f64>, q: f64) -> Result<f64> {
    let h1 = h1_zero_order(tables, t, mu)?;
    Ok((tables.chi_at(t) * q + 0.5 * h1) / tables.kappa_at(t))
}

/// nu_1^eps(t, mu, q, y) = (1 + eta_clamped(y)) (nu^TS + V_eps . C1(t)).
pub fn nu_first_order(
    tables: &StrategyTables,
    t: f64,
    mu: &DVector<f64>,
    q: f64,
    y: f64,
    apply_impact_modulation: bool,
) -> Result<f64> {
    let v = tables
        .v_eps
        .as_ref()
        .ok_or_else(|| Error::Unsupported("V_eps unavailable for this eta".into()))?;
    let base = nu_ts(tables, t, mu, q)? + v.dot(&tables.c1_at(t));
    let factor = if apply_impact_modulation {
        1.0 + tables.impact.eta_clamped(y)
    } else {
        1.0
    };
    Ok(factor * base)
}

/// Dispatch on `PolicyKind`.
pub fn trading_rate(
    tables: &StrategyTables,
    policy: PolicyKind,
    t: f64,
    mu: &DVector<f64>,
    q: f64,
    y: f64,
) -> Result<f64> {
    match policy {
        PolicyKind::Ac => Ok(nu_ac(tables, t, q)),
        PolicyKind::Ts => nu_ts(tables, t, mu, q),
        PolicyKind::FirstOrder { apply_impact_modulation } => {
            nu_first_order(tables, t, mu, q, y, apply_impact_modulation)
        }
    }
}

/// First-order value approximation
///
/// ```text
/// H1(t, x, S, mu, q) = x + q S + h0^(0) + h0^(1) q + (X0 - b/2) q^2
///                      + V_eps . (2 kappa C1) q,
/// ```
///
/// truncating the first-order term to its q-linear part (the q-free first-order
/// constant is a diagnostics-only refinement and is omitted).
pub fn value_first_order(
    tables: &StrategyTables,
    t: f64,
    x: f64,
    s: f64,
    mu: &DVector<f64>,
    q: f64,
) -> Result<f64> {
    let h0 = h0_zero_order(tables, t, mu)?;
    let h1 = h1_zero_order(tables, t, mu)?;
    let quad = (tables.chi_at(t) - tables.problem.b / 2.0) * q * q;
    let first_order = match &tables.v_eps {
        Some(v) => v.dot(&tables.phi1_correction_at(t)) * q,
        None => 0.0,
    };
    Ok(x + q * s + h0 + h1 * q + quad + first_order)
}
