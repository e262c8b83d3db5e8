//! Domain types: execution problem parameters, the stochastic impact model
//! k(t,y) = kappa(t) / (1 + eta(y)), the OU signal model and the joint
//! Brownian correlation structure.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform time grid 0 = t_0 < ... < t_N = T.
#[derive(Debug, Clone)]
pub struct TimeGrid {
    pub horizon: f64,
    pub n_steps: usize,
    pub t: Vec<f64>,
    pub dt: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(Error::InvalidParameter("horizon must be positive".into()));
        }
        if n_steps < 2 {
            return Err(Error::InvalidParameter("n_steps must be >= 2".into()));
        }
        let n = n_steps as f64;
        let t = (0..=n_steps).map(|i| horizon * i as f64 / n).collect();
        Ok(Self { horizon, n_steps, t, dt: horizon / n })
    }

    /// Index of the node nearest to `t`.
    pub fn nearest(&self, t: f64) -> usize {
        let i = (t / self.dt).round() as i64;
        i.clamp(0, self.n_steps as i64) as usize
    }

    /// Fractional position (i, w) such that t = (1-w) t_i + w t_{i+1}.
    pub fn locate(&self, t: f64) -> (usize, f64) {
        let x = (t / self.dt).clamp(0.0, self.n_steps as f64);
        let i = (x.floor() as usize).min(self.n_steps - 1);
        (i, x - i as f64)
    }
}

/// The map eta driving the multiplicative impact perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaKind {
    /// eta(y) = y.
    Identity,
    /// eta(y) = a * tanh(y), bounded with |eta| < a < 1.
    ScaledTanh(f64),
}

/// Economic parameters of the execution problem.
#[derive(Debug, Clone)]
pub struct ExecutionProblem {
    /// Signal loading vector: price drift per unit signal.
    pub gamma: DVector<f64>,
    /// Permanent impact coefficient.
    pub b: f64,
    /// Price volatility.
    pub sigma: f64,
    /// Running inventory penalty.
    pub phi: f64,
    /// Terminal liquidation penalty.
    pub varphi: f64,
    /// Horizon, normalized so one trading day = 1.
    pub horizon: f64,
    pub s0: f64,
    pub x0: f64,
    pub q0: f64,
    pub mu0: DVector<f64>,
}

impl ExecutionProblem {
    pub fn validate(&self) -> Result<()> {
        if self.phi < 0.0 || self.varphi < 0.0 {
            return Err(Error::InvalidParameter("phi and varphi must be nonnegative".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::InvalidParameter("T must be positive".into()));
        }
        if self.sigma < 0.0 {
            return Err(Error::InvalidParameter("sigma must be nonnegative".into()));
        }
        // varphi >= b/2 keeps the terminal Riccati value -varphi + b/2
        // nonpositive (net selling pressure at the horizon).
        if self.varphi < self.b / 2.0 {
            return Err(Error::InvalidParameter(format!(
                "varphi = {} must be at least b/2 = {}",
                self.varphi,
                self.b / 2.0
            )));
        }
        if self.gamma.len() != self.mu0.len() {
            return Err(Error::DimensionMismatch { expected: self.gamma.len(), got: self.mu0.len() });
        }
        Ok(())
    }

    /// Terminal Riccati value X(T) = -varphi + b/2.
    pub fn chi_terminal(&self) -> f64 {
        -self.varphi + self.b / 2.0
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }
}

/// Stochastic temporary impact: diurnal curve kappa(t) times (1 + eta(Y))^{-1},
/// with Y an OU factor mean-reverting on time scale eps.
#[derive(Debug, Clone)]
pub struct ImpactModel {
    /// Polynomial coefficients alpha_1..alpha_J of kappa in normalized time,
    /// kappa(t) = sum_j alpha_j t^{j-1}.
    pub kappa: Vec<f64>,
    pub eta_kind: EtaKind,
    /// Mean-reversion time scale of the impact factor.
    pub eps: f64,
    /// Diffusion scale of the impact factor; stationary std of Y is beta.
    pub beta_param: f64,
    /// Lower clamp delta for 1 + eta in simulation.
    pub eta_clamp: f64,
}

impl ImpactModel {
    pub fn new(
        kappa: Vec<f64>,
        eta_kind: EtaKind,
        eps: f64,
        beta_param: f64,
        eta_clamp: f64,
    ) -> Result<Self> {
        let model = Self { kappa, eta_kind, eps, beta_param, eta_clamp };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kappa.is_empty() {
            return Err(Error::InvalidParameter("kappa coefficients must be nonempty".into()));
        }
        if self.kappa.len() > 8 {
            return Err(Error::InvalidParameter("kappa polynomial order J must be <= 8".into()));
        }
        if !(self.eps > 0.0) || !(self.beta_param > 0.0) {
            return Err(Error::InvalidParameter("eps and beta_param must be positive".into()));
        }
        if !(self.eta_clamp > 0.0 && self.eta_clamp < 1.0) {
            return Err(Error::InvalidParameter("eta_clamp must lie in (0, 1)".into()));
        }
        if let EtaKind::ScaledTanh(a) = self.eta_kind {
            if !(a >= 0.0 && a < 1.0) {
                return Err(Error::InvalidParameter("scaled_tanh parameter must lie in [0, 1)".into()));
            }
        }
        // kappa(t) > 0 checked on a dense grid over the normalized day.
        for i in 0..=2000 {
            let t = i as f64 / 2000.0;
            if self.kappa_poly(t) <= 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "kappa(t) must be positive on [0,1]; kappa({t}) = {}",
                    self.kappa_poly(t)
                )));
            }
        }
        Ok(())
    }

    fn kappa_poly(&self, t: f64) -> f64 {
        // Horner evaluation of sum_j alpha_j t^{j-1}.
        self.kappa.iter().rev().fold(0.0, |acc, &a| acc * t + a)
    }

    pub fn eta(&self, y: f64) -> f64 {
        match self.eta_kind {
            EtaKind::Identity => y,
            EtaKind::ScaledTanh(a) => a * y.tanh(),
        }
    }

    /// eta clamped below at eta_clamp - 1 so that 1 + eta >= eta_clamp > 0.
    pub fn eta_clamped(&self, y: f64) -> f64 {
        self.eta(y).max(self.eta_clamp - 1.0)
    }
}

/// Evaluate the diurnal curve kappa at normalized time t in [0, 1].
pub fn kappa_eval(impact: &ImpactModel, t: f64) -> Result<f64> {
    const TOL: f64 = 1e-9;
    if !((-TOL..=1.0 + TOL).contains(&t)) {
        return Err(Error::Domain { t, lo: 0.0, hi: 1.0 });
    }
    Ok(impact.kappa_poly(t.clamp(0.0, 1.0)))
}

/// Evaluate the stochastic impact k(t, y) = kappa(t) / (1 + eta_clamped(y)).
pub fn k_eval(impact: &ImpactModel, t: f64, y: f64) -> Result<f64> {
    Ok(kappa_eval(impact, t)? / (1.0 + impact.eta_clamped(y)))
}

/// OU trading-signal model d mu = (A mu + mu_bar) dt + B dW'.
#[derive(Debug, Clone)]
pub struct SignalModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub mu_bar: DVector<f64>,
    /// Correlation between each W'_i and the impact factor noise W*.
    pub rho: DVector<f64>,
}

impl SignalModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, mu_bar: DVector<f64>, rho: DVector<f64>) -> Result<Self> {
        let d = a.nrows();
        if a.ncols() != d || b.nrows() != d || b.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, got: b.nrows() });
        }
        if mu_bar.len() != d || rho.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: rho.len() });
        }
        for &r in rho.iter() {
            if !(-1.0 < r && r < 1.0) {
                return Err(Error::InvalidParameter(format!("rho entries must lie in (-1, 1), got {r}")));
            }
        }
        Ok(Self { a, b, mu_bar, rho })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// Warn (do not reject) when A has an eigenvalue with positive real part.
    pub fn stationarity_warning(&self) -> Option<String> {
        let eig = self.a.complex_eigenvalues();
        let max_re = eig.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
        if max_re > 1e-12 {
            Some(format!(
                "signal matrix A has an eigenvalue with real part {max_re:.3e} > 0; the signal is non-stationary"
            ))
        } else {
            None
        }
    }
}

/// Joint correlation of the (d+2) Brownian motions in order (W, W'_1..W'_d, W*)
/// together with its lower-triangular Cholesky factor.
#[derive(Debug, Clone)]
pub struct Correlation {
    pub matrix: DMatrix<f64>,
    pub factor: DMatrix<f64>,
}

/// Assemble the (d+2)x(d+2) correlation matrix. W is independent of all others,
/// the W'_i are mutually independent, and corr(W'_i, W*) = rho_i.
pub fn build_correlation(signal: &SignalModel) -> Result<Correlation> {
    let d = signal.dim();
    let n = d + 2;
    let mut c = DMatrix::identity(n, n);
    for i in 0..d {
        c[(1 + i, n - 1)] = signal.rho[i];
        c[(n - 1, 1 + i)] = signal.rho[i];
    }
    let chol = c.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
    Ok(Correlation { matrix: c, factor: chol.l() })
}
