//! Numerical check of the asymptotic accuracy claim: solve the full nonlinear
//! PDE for X^eps(t, y),
//!
//! ```text
//! dX/dt - phi + (X)^2 / k(t,y) + (1/eps) L0 X = 0,
//! L0 = -y d/dy + beta^2 d^2/dy^2,      X(T, y) = -varphi + b/2,
//! ```
//!
//! with an IMEX finite-difference scheme (implicit L0, explicit reaction) and
//! confirm sup |X^eps - X0| = O(eps).

use crate::error::{Error, Result};
use crate::model::{kappa_eval, EtaKind, ExecutionProblem, ImpactModel, TimeGrid};
use crate::riccati::solve_riccati;

/// Discretization of the (t, y) domain.
#[derive(Debug, Clone)]
pub struct PdeGrid {
    /// y domain is [-l, l].
    pub l: f64,
    /// Number of y intervals (m + 1 nodes).
    pub m: usize,
    /// Number of time steps.
    pub n_t: usize,
}

impl PdeGrid {
    /// Default verification grid: l = 6 beta (six stationary standard
    /// deviations), m = 400, dt = eps/100.
    pub fn standard(impact: &ImpactModel, horizon: f64) -> Self {
        let n_t = (100.0 * horizon / impact.eps).ceil() as usize;
        Self { l: 6.0 * impact.beta_param, m: 400, n_t: n_t.max(2) }
    }

    pub fn dy(&self) -> f64 {
        2.0 * self.l / self.m as f64
    }

    pub fn y_nodes(&self) -> Vec<f64> {
        (0..=self.m).map(|j| -self.l + j as f64 * self.dy()).collect()
    }
}

/// Solution record of one PDE solve.
#[derive(Debug, Clone)]
pub struct PdeSolution {
    pub grid: PdeGrid,
    pub y: Vec<f64>,
    /// X^eps(0, y_j), the initial-time slice.
    pub initial_slice: Vec<f64>,
    /// sup over all grid nodes of |X^eps(t, y) - X0(t)|.
    pub sup_error: f64,
    /// Full field X^eps(t_i, y_j), kept only when requested.
    pub field: Option<Vec<Vec<f64>>>,
    pub eps: f64,
}

/// Solve the backward nonlinear PDE. `impact.eta_kind` must be bounded
/// (scaled tanh); the identity eta breaks positivity of k on an unbounded
/// y domain.
pub fn solve_chi_pde(
    problem: &ExecutionProblem,
    impact: &ImpactModel,
    grid: &PdeGrid,
    store_field: bool,
) -> Result<PdeSolution> {
    let a_amp = match impact.eta_kind {
        EtaKind::ScaledTanh(a) => a,
        EtaKind::Identity => {
            return Err(Error::Unsupported(
                "solve_chi_pde requires a bounded eta (scaled_tanh)".into(),
            ))
        }
    };
    let horizon = problem.horizon;
    let eps = impact.eps;
    let beta2 = impact.beta_param * impact.beta_param;
    let m = grid.m;
    let n_t = grid.n_t;
    if m < 4 || n_t < 2 {
        return Err(Error::InvalidParameter("PDE grid too coarse".into()));
    }
    let dy = grid.dy();
    let dt = horizon / n_t as f64;
    let y = grid.y_nodes();

    // Stability of the explicit reaction term: dt * 2 |X|_max / k_min < 0.5.
    let tgrid = TimeGrid::new(horizon, n_t)?;
    let kappa_max = tgrid
        .t
        .iter()
        .map(|&t| kappa_eval(impact, t).unwrap_or(0.0))
        .fold(0.0f64, f64::max);
    let kappa_min = tgrid
        .t
        .iter()
        .map(|&t| kappa_eval(impact, t).unwrap_or(f64::INFINITY))
        .fold(f64::INFINITY, f64::min);
    let k_min = kappa_min / (1.0 + a_amp);
    let chi_bound = (problem.varphi - problem.b / 2.0)
        .abs()
        .max((problem.phi * kappa_max / (1.0 - a_amp).max(1e-12)).sqrt());
    if dt * 2.0 * chi_bound / k_min >= 0.5 {
        return Err(Error::InvalidParameter(format!(
            "time step {dt:.3e} violates the reaction stability budget; refine n_t"
        )));
    }

    // Implicit operator I - (dt/eps) L0, tridiagonal with Neumann folding.
    let r_diff = dt / eps * beta2 / (dy * dy);
    let mut lower = vec![0.0; m + 1];
    let mut diag = vec![0.0; m + 1];
    let mut upper = vec![0.0; m + 1];
    for j in 0..=m {
        let adv = dt / eps * (-y[j]) / (2.0 * dy);
        let lo = -(r_diff - adv); // coefficient of X_{j-1} in -dt/eps L
        let up = -(r_diff + adv);
        lower[j] = lo;
        upper[j] = up;
        diag[j] = 1.0 + 2.0 * r_diff;
    }
    // ghost folding X_{-1} = X_1 and X_{m+1} = X_{m-1}
    upper[0] += lower[0];
    lower[m] += upper[m];

    // Reference X0(t) for the error sup; solved on the same time grid.
    let riccati = solve_riccati(problem, impact, &tgrid)?;

    let mut x = vec![problem.chi_terminal(); m + 1];
    let mut rhs = vec![0.0; m + 1];
    let mut sup_error = 0.0f64;
    for (j, _) in y.iter().enumerate() {
        sup_error = sup_error.max((x[j] - riccati.chi[n_t]).abs());
    }
    let mut field = store_field.then(|| {
        let mut f = vec![Vec::new(); n_t + 1];
        f[n_t] = x.clone();
        f
    });

    // march backward in t (forward in tau = T - t)
    for step in 0..n_t {
        let i_t = n_t - step; // current time index; advancing to i_t - 1
        let t_expl = tgrid.t[i_t];
        let max_old = x.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        for j in 0..=m {
            let k = kappa_eval(impact, t_expl)? / (1.0 + a_amp * y[j].tanh());
            rhs[j] = x[j] + dt * (-problem.phi + x[j] * x[j] / k);
        }
        thomas_solve(&lower, &diag, &upper, &rhs, &mut x)?;
        let max_new = x.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        if !max_new.is_finite() || max_new > 10.0 * max_old + 1e-9 {
            return Err(Error::PdeDiverged { step, growth: max_new / max_old.max(1e-300) });
        }
        let chi0 = riccati.chi[i_t - 1];
        for &v in &x {
            sup_error = sup_error.max((v - chi0).abs());
        }
        if let Some(f) = field.as_mut() {
            f[i_t - 1] = x.clone();
        }
    }

    Ok(PdeSolution {
        grid: grid.clone(),
        y,
        initial_slice: x,
        sup_error,
        field,
        eps,
    })
}

/// Tridiagonal solve (Thomas algorithm) of the system with the given bands.
fn thomas_solve(
    lower: &[f64],
    diag: &[f64],
    upper: &[f64],
    rhs: &[f64],
    out: &mut [f64],
) -> Result<()> {
    let n = diag.len();
    let mut c_star = vec![0.0; n];
    let mut d_star = vec![0.0; n];
    let mut denom = diag[0];
    if denom.abs() < 1e-300 {
        return Err(Error::InvalidParameter("singular tridiagonal system".into()));
    }
    c_star[0] = upper[0] / denom;
    d_star[0] = rhs[0] / denom;
    for j in 1..n {
        denom = diag[j] - lower[j] * c_star[j - 1];
        if denom.abs() < 1e-300 {
            return Err(Error::InvalidParameter("singular tridiagonal system".into()));
        }
        c_star[j] = upper[j] / denom;
        d_star[j] = (rhs[j] - lower[j] * d_star[j - 1]) / denom;
    }
    out[n - 1] = d_star[n - 1];
    for j in (0..n - 1).rev() {
        out[j] = d_star[j] - c_star[j] * out[j + 1];
    }
    Ok(())
}

/// One row of the scaling study.
#[derive(Debug, Clone)]
pub struct ScalingRow {
    pub eps: f64,
    pub sup_error: f64,
    /// error(eps) / error(previous eps); NaN for the first row.
    pub ratio: f64,
    /// sup_error / eps.
    pub c_hat: f64,
}

/// Run the solver across a list of eps values (time step refined with eps,
/// dt = eps/100; fixed y resolution) and report the first-order scaling.
pub fn epsilon_scaling_study(
    problem: &ExecutionProblem,
    impact_template: &ImpactModel,
    eps_list: &[f64],
    m: usize,
) -> Result<Vec<ScalingRow>> {
    let mut rows: Vec<ScalingRow> = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let impact = ImpactModel::new(
            impact_template.kappa.clone(),
            impact_template.eta_kind,
            eps,
            impact_template.beta_param,
            impact_template.eta_clamp,
        )?;
        let grid = PdeGrid {
            m,
            ..PdeGrid::standard(&impact, problem.horizon)
        };
        let sol = solve_chi_pde(problem, &impact, &grid, false)?;
        let ratio = match rows.last() {
            Some(prev) => sol.sup_error / prev.sup_error,
            None => f64::NAN,
        };
        rows.push(ScalingRow { eps, sup_error: sol.sup_error, ratio, c_hat: sol.sup_error / eps });
    }
    Ok(rows)
}
