//! Closed-form OU-signal machinery: matrix exponentials, the weighted
//! integrals Phi0/Phi1/Phi2 under the Riccati integrating factor, the
//! first-order control correction C1, the effective volatility vector V_eps,
//! and the zero-order value functions h0^(1), h0^(0).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{EtaKind, ExecutionProblem, ImpactModel, SignalModel, TimeGrid};
use crate::riccati::RiccatiSolution;

/// Dense matrix exponential by scaling-and-squaring with a truncated Taylor
/// series. Intended for small matrices (d <= 8ish); relative error below
/// 1e-12 for moderate norms.
pub fn mat_exp(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "mat_exp requires a square matrix");
    let norm = inf_norm(m);
    if norm > 1e3 {
        return Err(Error::MatExpOverflow(norm));
    }
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as u32 } else { 0 };
    let scaled = m / 2f64.powi(squarings as i32);
    let mut result = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..=60 {
        term = &term * &scaled / k as f64;
        result += &term;
        if inf_norm(&term) < 1e-18 * inf_norm(&result).max(1.0) {
            break;
        }
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    Ok(result)
}

/// int_0^h e^{A w} dw via the augmented block exponential
/// exp([[A, I], [0, 0]] h) = [[e^{Ah}, int_0^h e^{Aw} dw], [0, I]].
pub fn exp_integral(a: &DMatrix<f64>, h: f64) -> Result<DMatrix<f64>> {
    let d = a.nrows();
    let mut aug = DMatrix::zeros(2 * d, 2 * d);
    aug.view_mut((0, 0), (d, d)).copy_from(&(a * h));
    aug.view_mut((0, d), (d, d)).copy_from(&(DMatrix::identity(d, d) * h));
    let e = mat_exp(&aug)?;
    Ok(e.view((0, d), (d, d)).into())
}

/// One-step conditional covariance of the OU signal,
/// Q_h = int_0^h e^{Aw} B B^T e^{A^T w} dw, by composite Simpson.
pub fn ou_step_cov(a: &DMatrix<f64>, b: &DMatrix<f64>, h: f64) -> Result<DMatrix<f64>> {
    let d = a.nrows();
    let bbt = b * b.transpose();
    let n_sub = 64usize; // even
    let dw = h / n_sub as f64;
    let step = mat_exp(&(a * dw))?;
    let mut e = DMatrix::identity(d, d);
    let mut acc = DMatrix::zeros(d, d);
    for j in 0..=n_sub {
        let f = &e * &bbt * e.transpose();
        let w = if j == 0 || j == n_sub {
            1.0
        } else if j % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += f * w;
        if j < n_sub {
            e = &e * &step;
        }
    }
    Ok(acc * (dw / 3.0))
}

fn inf_norm(m: &DMatrix<f64>) -> f64 {
    let mut best = 0.0f64;
    for i in 0..m.nrows() {
        let row_sum: f64 = (0..m.ncols()).map(|j| m[(i, j)].abs()).sum();
        best = best.max(row_sum);
    }
    best
}

/// Per-step integrating-factor weights w_i = exp(Lambda(t_{i+1}) - Lambda(t_i)).
fn step_weights(riccati: &RiccatiSolution) -> Vec<f64> {
    riccati
        .log_g
        .windows(2)
        .map(|w| (w[1] - w[0]).exp())
        .collect()
}

/// chi / kappa on the grid.
fn chi_over_kappa(riccati: &RiccatiSolution) -> Vec<f64> {
    riccati
        .chi
        .iter()
        .zip(&riccati.kappa)
        .map(|(&c, &k)| c / k)
        .collect()
}

/// Phi1(t) = int_t^T e^{int_t^s chi/kappa} e^{A(s-t)} ds on the grid.
///
/// Uses the backward recursion
///     Phi1(t_i) = local_i + w_i E Phi1(t_{i+1}),   E = e^{A dt},
/// with the one-interval integral from the quadratic through three
/// consecutive nodes (cumulative-Simpson weights 5/12, 8/12, -1/12).
pub fn compute_phi1(
    riccati: &RiccatiSolution,
    signal: &SignalModel,
    _impact: &ImpactModel,
    grid: &TimeGrid,
) -> Result<Vec<DMatrix<f64>>> {
    let n = grid.n_steps;
    let d = signal.dim();
    let dt = grid.dt;
    let w = step_weights(riccati);
    let e = mat_exp(&(&signal.a * dt))?;
    let e2 = &e * &e;
    let e_inv = mat_exp(&(&signal.a * -dt))?;
    let id = DMatrix::identity(d, d);

    let mut tab = vec![DMatrix::zeros(d, d); n + 1];
    for i in (0..n).rev() {
        let local = if i + 2 <= n {
            // f(s) = G(t_i, s) e^{A(s - t_i)} at t_i, t_{i+1}, t_{i+2}
            let f1 = &e * w[i];
            let f2 = &e2 * (w[i] * w[i + 1]);
            (&id * 5.0 + f1 * 8.0 - f2) * (dt / 12.0)
        } else {
            // last interval: nodes t_{i-1}, t_i, t_{i+1}
            let fm = &e_inv / w[i - 1];
            let f1 = &e * w[i];
            (-fm + &id * 8.0 + f1 * 5.0) * (dt / 12.0)
        };
        tab[i] = local + (&e * &tab[i + 1]) * w[i];
    }
    Ok(tab)
}

/// J(t) = int_t^T e^{int_t^s chi/kappa} ds (scalar companion of Phi1).
fn compute_j_tail(riccati: &RiccatiSolution, grid: &TimeGrid) -> Vec<f64> {
    let n = grid.n_steps;
    let dt = grid.dt;
    let w = step_weights(riccati);
    let mut tab = vec![0.0; n + 1];
    for i in (0..n).rev() {
        let local = if i + 2 <= n {
            (5.0 + 8.0 * w[i] - w[i] * w[i + 1]) * dt / 12.0
        } else {
            (-1.0 / w[i - 1] + 8.0 + 5.0 * w[i]) * dt / 12.0
        };
        tab[i] = local + w[i] * tab[i + 1];
    }
    tab
}

/// Phi0(t) = int_t^T e^{int_t^s chi/kappa} int_t^s e^{A(s-u)} du ds.
///
/// Dispatches to the invertible shortcut Phi0 = Phi1 - J(t) A^{-1} when A is
/// well conditioned, otherwise to the direct nested quadrature.
pub fn compute_phi0(
    riccati: &RiccatiSolution,
    signal: &SignalModel,
    impact: &ImpactModel,
    grid: &TimeGrid,
    phi1: &[DMatrix<f64>],
) -> Result<Vec<DMatrix<f64>>> {
    let min_sv = signal
        .a
        .clone()
        .svd(false, false)
        .singular_values
        .iter()
        .fold(f64::INFINITY, |m, &s| m.min(s));
    if min_sv > 1e-8 {
        compute_phi0_invertible(riccati, signal, grid, phi1)
    } else {
        compute_phi0_general(riccati, signal, impact, grid)
    }
}

/// Invertible-A shortcut: since int_t^s e^{A(s-u)} du = (e^{A(s-t)} - I) A^{-1},
/// Phi0(t) = (Phi1(t) - J(t) I) A^{-1}.
pub fn compute_phi0_invertible(
    riccati: &RiccatiSolution,
    signal: &SignalModel,
    grid: &TimeGrid,
    phi1: &[DMatrix<f64>],
) -> Result<Vec<DMatrix<f64>>> {
    let a_inv = signal
        .a
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidParameter("A is singular".into()))?;
    let d = signal.dim();
    let j = compute_j_tail(riccati, grid);
    Ok(phi1
        .iter()
        .zip(&j)
        .map(|(p1, &ji)| (p1 - DMatrix::identity(d, d) * ji) * &a_inv)
        .collect())
}

/// General path without inverting A, using Psi(tau) = int_0^tau e^{Aw} dw and
/// the recursion Phi0(t_i) = local_i + w_i (Psi(dt) J(t_{i+1}) + E Phi0(t_{i+1})).
pub fn compute_phi0_general(
    riccati: &RiccatiSolution,
    signal: &SignalModel,
    _impact: &ImpactModel,
    grid: &TimeGrid,
) -> Result<Vec<DMatrix<f64>>> {
    let n = grid.n_steps;
    let d = signal.dim();
    let dt = grid.dt;
    let w = step_weights(riccati);
    let e = mat_exp(&(&signal.a * dt))?;
    let psi = exp_integral(&signal.a, dt)?;
    let psi2 = &psi + &e * &psi; // Psi(2 dt)
    let psi_neg = exp_integral(&signal.a, -dt)?; // Psi(-dt)
    let j = compute_j_tail(riccati, grid);

    let mut tab = vec![DMatrix::zeros(d, d); n + 1];
    for i in (0..n).rev() {
        let local = if i + 2 <= n {
            // f(s) = G(t_i, s) Psi(s - t_i): f(t_i) = 0
            let f1 = &psi * w[i];
            let f2 = &psi2 * (w[i] * w[i + 1]);
            (f1 * 8.0 - f2) * (dt / 12.0)
        } else {
            let fm = &psi_neg / w[i - 1];
            let f1 = &psi * w[i];
            (-fm + f1 * 5.0) * (dt / 12.0)
        };
        tab[i] = local + (&psi * j[i + 1] + &e * &tab[i + 1]) * w[i];
    }
    Ok(tab)
}

/// Phi2_{ji}(t) = int_t^T e^{int_t^s chi/kappa} (chi(s)/kappa(s)) Phi1_{ji}(s) ds.
pub fn compute_phi2(
    riccati: &RiccatiSolution,
    signal: &SignalModel,
    _impact: &ImpactModel,
    grid: &TimeGrid,
    phi1: &[DMatrix<f64>],
) -> Result<Vec<DMatrix<f64>>> {
    let n = grid.n_steps;
    let d = signal.dim();
    let dt = grid.dt;
    let w = step_weights(riccati);
    let g = chi_over_kappa(riccati);

    let mut tab = vec![DMatrix::zeros(d, d); n + 1];
    for i in (0..n).rev() {
        let local = if i + 2 <= n {
            let f0 = &phi1[i] * g[i];
            let f1 = &phi1[i + 1] * (g[i + 1] * w[i]);
            let f2 = &phi1[i + 2] * (g[i + 2] * w[i] * w[i + 1]);
            (f0 * 5.0 + f1 * 8.0 - f2) * (dt / 12.0)
        } else {
            let fm = &phi1[i - 1] * (g[i - 1] / w[i - 1]);
            let f0 = &phi1[i] * g[i];
            let f1 = &phi1[i + 1] * (g[i + 1] * w[i]);
            (-fm + f0 * 8.0 + f1 * 5.0) * (dt / 12.0)
        };
        tab[i] = local + &tab[i + 1] * w[i];
    }
    Ok(tab)
}

/// Effective volatility vector V_eps = sqrt(2 eps) beta rho, valid for the
/// identity eta (where the Poisson solution is psi(y) = -y).
pub fn compute_v_eps(impact: &ImpactModel, signal: &SignalModel) -> Result<DVector<f64>> {
    match impact.eta_kind {
        EtaKind::Identity => Ok(&signal.rho * ((2.0 * impact.eps).sqrt() * impact.beta_param)),
        EtaKind::ScaledTanh(_) => Err(Error::Unsupported(
            "V_eps requires the identity eta; general eta needs the Poisson solution psi".into(),
        )),
    }
}

/// C1(t) = (1 / 2 kappa(t)) sum_i b_i (gamma . Phi2 column i) = B^T Phi2^T gamma / (2 kappa).
pub fn compute_c1(
    riccati: &RiccatiSolution,
    signal: &SignalModel,
    problem: &ExecutionProblem,
    phi2: &[DMatrix<f64>],
) -> Vec<DVector<f64>> {
    phi2.iter()
        .zip(&riccati.kappa)
        .map(|(p2, &k)| signal.b.transpose() * (p2.transpose() * &problem.gamma) / (2.0 * k))
        .collect()
}

/// Precomputed time tables feeding all three policies.
#[derive(Debug, Clone)]
pub struct StrategyTables {
    pub grid: TimeGrid,
    pub riccati: RiccatiSolution,
    pub problem: ExecutionProblem,
    pub impact: ImpactModel,
    pub signal: SignalModel,
    pub phi1: Vec<DMatrix<f64>>,
    pub phi0: Vec<DMatrix<f64>>,
    pub phi2: Vec<DMatrix<f64>>,
    pub c1: Vec<DVector<f64>>,
    /// V_eps; None when eta is not the identity map.
    pub v_eps: Option<DVector<f64>>,
    /// gamma^T Phi1(t), the coefficient of mu in h0^(1).
    pub h0_coeff: Vec<DVector<f64>>,
    /// gamma^T Phi0(t) mu_bar, the constant part of h0^(1).
    pub h0_const: Vec<f64>,
}

impl StrategyTables {
    pub fn build(
        problem: &ExecutionProblem,
        impact: &ImpactModel,
        signal: &SignalModel,
        riccati: &RiccatiSolution,
    ) -> Result<Self> {
        problem.validate()?;
        if problem.dim() != signal.dim() {
            return Err(Error::DimensionMismatch { expected: problem.dim(), got: signal.dim() });
        }
        let grid = riccati.grid.clone();
        let phi1 = compute_phi1(riccati, signal, impact, &grid)?;
        let phi0 = compute_phi0(riccati, signal, impact, &grid, &phi1)?;
        let phi2 = compute_phi2(riccati, signal, impact, &grid, &phi1)?;
        let c1 = compute_c1(riccati, signal, problem, &phi2);
        let v_eps = compute_v_eps(impact, signal).ok();
        let h0_coeff = phi1.iter().map(|p| p.transpose() * &problem.gamma).collect();
        let h0_const = phi0
            .iter()
            .map(|p| (problem.gamma.transpose() * p * &signal.mu_bar)[0])
            .collect();
        Ok(Self {
            grid,
            riccati: riccati.clone(),
            problem: problem.clone(),
            impact: impact.clone(),
            signal: signal.clone(),
            phi1,
            phi0,
            phi2,
            c1,
            v_eps,
            h0_coeff,
            h0_const,
        })
    }

    pub fn kappa_at(&self, t: f64) -> f64 {
        let (i, w) = self.grid.locate(t);
        (1.0 - w) * self.riccati.kappa[i] + w * self.riccati.kappa[i + 1]
    }

    pub fn chi_at(&self, t: f64) -> f64 {
        self.riccati.chi_at(t)
    }

    pub fn c1_at(&self, t: f64) -> DVector<f64> {
        let (i, w) = self.grid.locate(t);
        &self.c1[i] * (1.0 - w) + &self.c1[i + 1] * w
    }

    /// phi_1(t) = 2 kappa(t) C1(t), the q-linear first-order value coefficient
    /// (so that h1^(1) = V . phi_1).
    pub fn phi1_correction_at(&self, t: f64) -> DVector<f64> {
        self.c1_at(t) * (2.0 * self.kappa_at(t))
    }
}

/// h0^(1)(t, mu) = gamma^T (Phi1(t) mu + Phi0(t) mu_bar), linear interpolation
/// between grid nodes.
pub fn h1_zero_order(tables: &StrategyTables, t: f64, mu: &DVector<f64>) -> Result<f64> {
    if mu.len() != tables.problem.dim() {
        return Err(Error::DimensionMismatch { expected: tables.problem.dim(), got: mu.len() });
    }
    let (i, w) = tables.grid.locate(t);
    let at = |j: usize| tables.h0_coeff[j].dot(mu) + tables.h0_const[j];
    Ok((1.0 - w) * at(i) + w * at(i + 1))
}

/// h0^(0)(t, mu) = int_t^T (1 / 4 kappa(s)) E[(h0^(1))^2(s, mu_s) | mu_t = mu] ds,
/// with the Gaussian OU conditional moments evaluated in closed form:
/// E[(h0^(1))^2] = (a(s) . m_s + c(s))^2 + a(s)^T Sigma_s a(s).
pub fn h0_zero_order(tables: &StrategyTables, t: f64, mu: &DVector<f64>) -> Result<f64> {
    if mu.len() != tables.problem.dim() {
        return Err(Error::DimensionMismatch { expected: tables.problem.dim(), got: mu.len() });
    }
    let horizon = tables.grid.horizon;
    if t >= horizon {
        return Ok(0.0);
    }
    let dt = tables.grid.dt;
    let a = &tables.signal.a;
    let e = mat_exp(&(a * dt))?;
    let psi = exp_integral(a, dt)?;
    let q = ou_step_cov(a, &tables.signal.b, dt)?;

    let integrand = |s: f64, m: &DVector<f64>, sig: &DMatrix<f64>| -> f64 {
        let (i, w) = tables.grid.locate(s);
        let coeff = &tables.h0_coeff[i] * (1.0 - w) + &tables.h0_coeff[i + 1] * w;
        let cst = (1.0 - w) * tables.h0_const[i] + w * tables.h0_const[i + 1];
        let mean_part = coeff.dot(m) + cst;
        let var_part = (coeff.transpose() * sig * &coeff)[0];
        let kappa = (1.0 - w) * tables.riccati.kappa[i] + w * tables.riccati.kappa[i + 1];
        (mean_part * mean_part + var_part) / (4.0 * kappa)
    };

    // Trapezoid march in s with exact OU moment propagation.
    let mut m = mu.clone();
    let mut sig = DMatrix::zeros(a.nrows(), a.ncols());
    let mut s = t;
    let mut total = 0.0;
    let mut f_prev = integrand(s, &m, &sig);
    while s < horizon - 1e-12 {
        let h = dt.min(horizon - s);
        let (eh, psih, qh) = if (h - dt).abs() < 1e-15 {
            (e.clone(), psi.clone(), q.clone())
        } else {
            (mat_exp(&(a * h))?, exp_integral(a, h)?, ou_step_cov(a, &tables.signal.b, h)?)
        };
        m = &eh * &m + &psih * &tables.signal.mu_bar;
        sig = &eh * &sig * eh.transpose() + &qh;
        s += h;
        let f = integrand(s.min(horizon), &m, &sig);
        total += 0.5 * h * (f_prev + f);
        f_prev = f;
    }
    Ok(total)
}
