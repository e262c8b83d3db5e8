//! Backward Riccati ODE for the zero-order value coefficient X0(t),
//!
//! ```text
//! X' - phi + X^2 / kappa(t) = 0,    X(T) = -varphi + b/2,
//! ```
//!
//! plus the cumulative log integrating factor Lambda(t) = int_0^t X0/kappa du
//! used by every downstream signal integral.

use crate::error::{Error, Result};
use crate::model::{kappa_eval, ExecutionProblem, ImpactModel, TimeGrid};

/// Grid solution of the Riccati ODE.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub grid: TimeGrid,
    /// X0(t_i) on the grid.
    pub chi: Vec<f64>,
    /// Lambda(t_i) = int_0^{t_i} X0(u)/kappa(u) du, cumulative trapezoid.
    pub log_g: Vec<f64>,
    /// kappa(t_i), cached for table builders.
    pub kappa: Vec<f64>,
}

impl RiccatiSolution {
    /// X0(t) by linear interpolation between grid nodes.
    pub fn chi_at(&self, t: f64) -> f64 {
        let (i, w) = self.grid.locate(t);
        (1.0 - w) * self.chi[i] + w * self.chi[i + 1]
    }

    /// Lambda(t) by linear interpolation of log_g.
    pub fn log_g_at(&self, t: f64) -> f64 {
        let (i, w) = self.grid.locate(t);
        (1.0 - w) * self.log_g[i] + w * self.log_g[i + 1]
    }
}

/// Solve the Riccati ODE backward from T with classical RK4.
pub fn solve_riccati(
    problem: &ExecutionProblem,
    impact: &ImpactModel,
    grid: &TimeGrid,
) -> Result<RiccatiSolution> {
    let n = grid.n_steps;
    let phi = problem.phi;
    let mut kappa = Vec::with_capacity(n + 1);
    let mut max_kappa = 0.0f64;
    for &t in &grid.t {
        let k = kappa_eval(impact, t)?;
        kappa.push(k);
        max_kappa = max_kappa.max(k);
    }
    let chi_t = problem.chi_terminal();
    let threshold = 1e6 * problem.varphi.max((phi * max_kappa).sqrt()).max(chi_t.abs());

    let deriv = |t: f64, x: f64| -> Result<f64> { Ok(phi - x * x / kappa_eval(impact, t)?) };

    let mut chi = vec![0.0; n + 1];
    chi[n] = chi_t;
    for i in (1..=n).rev() {
        let t_next = grid.t[i - 1];
        let mut t = grid.t[i];
        let mut x = chi[i];
        // Sub-step within the interval when the local decay rate 2|X|/kappa
        // outruns the grid spacing (stiff boundary layer for large varphi).
        while t > t_next + 1e-15 {
            let stiffness = 2.0 * x.abs() / kappa_eval(impact, t)?;
            let h_mag = (t - t_next).min(0.5 / stiffness.max(1e-300)).max(1e-12 * grid.dt);
            let h = -h_mag;
            let k1 = deriv(t, x)?;
            let k2 = deriv(t + h / 2.0, x + h / 2.0 * k1)?;
            let k3 = deriv(t + h / 2.0, x + h / 2.0 * k2)?;
            let k4 = deriv(t + h, x + h * k3)?;
            x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            t += h;
            if !x.is_finite() || (threshold > 0.0 && x.abs() > threshold) {
                return Err(Error::BlowUp { t, threshold });
            }
        }
        chi[i - 1] = x;
    }

    // Cumulative trapezoid of X0/kappa.
    let mut log_g = vec![0.0; n + 1];
    for i in 0..n {
        let f0 = chi[i] / kappa[i];
        let f1 = chi[i + 1] / kappa[i + 1];
        log_g[i + 1] = log_g[i] + 0.5 * grid.dt * (f0 + f1);
    }

    Ok(RiccatiSolution { grid: grid.clone(), chi, log_g, kappa })
}

/// Closed-form solution of the constant-kappa Riccati ODE, used as an
/// independent oracle for `solve_riccati`.
///
/// With s = sqrt(kappa phi), g = sqrt(phi/kappa), X_T = -varphi + b/2 and
/// zeta = (X_T - s)/(X_T + s), the solution is
///
/// ```text
/// X(t) = s (1 + zeta e^{2g(T-t)}) / (1 - zeta e^{2g(T-t)}).
/// ```
///
/// (Validated by substitution into the ODE; see the unit tests below.)
pub fn riccati_closed_form(
    kappa_const: f64,
    phi: f64,
    varphi: f64,
    b: f64,
    horizon: f64,
    t: f64,
) -> Result<f64> {
    if !(kappa_const > 0.0) || !(phi > 0.0) {
        return Err(Error::InvalidParameter("closed form needs kappa > 0 and phi > 0".into()));
    }
    let chi_t = -varphi + b / 2.0;
    if chi_t >= 0.0 {
        return Err(Error::InvalidTerminal(chi_t));
    }
    let s = (kappa_const * phi).sqrt();
    let g = (phi / kappa_const).sqrt();
    let denom = chi_t + s;
    if denom.abs() < 1e-14 * s {
        // X_T sits exactly on the stable fixed point -sqrt(kappa phi).
        return Ok(-s);
    }
    let zeta = (chi_t - s) / denom;
    let e = (2.0 * g * (horizon - t)).exp();
    Ok(s * (1.0 + zeta * e) / (1.0 - zeta * e))
}

/// Integrating factor exp(int_t^s X0/kappa du) = exp(Lambda(s) - Lambda(t)).
pub fn integrating_factor(sol: &RiccatiSolution, t: f64, s: f64) -> Result<f64> {
    if t > s {
        return Err(Error::Domain { t, lo: 0.0, hi: s });
    }
    Ok((sol.log_g_at(s) - sol.log_g_at(t)).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EtaKind;
    use approx::assert_abs_diff_eq;
    use nalgebra::DVector;

    fn problem(phi: f64, varphi: f64, b: f64, horizon: f64) -> ExecutionProblem {
        ExecutionProblem {
            gamma: DVector::zeros(1),
            b,
            sigma: 0.0,
            phi,
            varphi,
            horizon,
            s0: 100.0,
            x0: 0.0,
            q0: 1.0,
            mu0: DVector::zeros(1),
        }
    }

    fn const_impact(kappa: f64) -> ImpactModel {
        ImpactModel::new(vec![kappa], EtaKind::Identity, 0.01, 0.3, 0.05).unwrap()
    }

    #[test]
    fn zero_forcing_zero_terminal_gives_zero() {
        // phi = 0, varphi = b/2 => X_T = 0 and X == 0.
        let p = problem(0.0, 0.5, 1.0, 1.0);
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let sol = solve_riccati(&p, &const_impact(1.0), &grid).unwrap();
        for &x in &sol.chi {
            assert_abs_diff_eq!(x, 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn closed_form_satisfies_ode_numerically() {
        // Oracle duty: substitute the closed form into X' - phi + X^2/kappa = 0
        // with centered differences.
        let (kappa, phi, varphi, b, horizon) = (0.7, 1.3, 4.0, 0.2, 1.0);
        let h = 1e-5;
        for i in 1..50 {
            let t = i as f64 / 50.0 * (horizon - 2.0 * h);
            let xm = riccati_closed_form(kappa, phi, varphi, b, horizon, t - h).unwrap();
            let x0 = riccati_closed_form(kappa, phi, varphi, b, horizon, t).unwrap();
            let xp = riccati_closed_form(kappa, phi, varphi, b, horizon, t + h).unwrap();
            let lhs = (xp - xm) / (2.0 * h) - phi + x0 * x0 / kappa;
            assert!(lhs.abs() < 1e-6, "ODE residual {lhs} at t = {t}");
        }
    }

    #[test]
    fn closed_form_terminal_value() {
        let x = riccati_closed_form(1.0, 1.0, 10.0, 0.0, 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(x, -10.0, epsilon = 1e-12);
    }

    #[test]
    fn closed_form_fixed_point() {
        // X_T = -sqrt(kappa phi) is a fixed point of the ODE.
        let x = riccati_closed_form(4.0, 1.0, 2.0, 0.0, 1.0, 0.3).unwrap();
        assert_abs_diff_eq!(x, -2.0, epsilon = 1e-12);
    }

    #[test]
    fn closed_form_rejects_nonnegative_terminal() {
        assert!(matches!(
            riccati_closed_form(1.0, 1.0, 0.0, 1.0, 1.0, 0.5),
            Err(Error::InvalidTerminal(_))
        ));
    }

    #[test]
    fn rk4_matches_closed_form() {
        let p = problem(1.0, 10.0, 0.0, 1.0);
        let grid = TimeGrid::new(1.0, 10_000).unwrap();
        let sol = solve_riccati(&p, &const_impact(1.0), &grid).unwrap();
        for (i, &t) in grid.t.iter().enumerate() {
            let exact = riccati_closed_form(1.0, 1.0, 10.0, 0.0, 1.0, t).unwrap();
            assert!((sol.chi[i] - exact).abs() < 1e-8, "deviation at t = {t}");
        }
    }

    #[test]
    fn chi_negative_and_bounded_for_constant_kappa() {
        let p = problem(1.0, 10.0, 0.0, 1.0);
        let grid = TimeGrid::new(1.0, 2_000).unwrap();
        let sol = solve_riccati(&p, &const_impact(1.0), &grid).unwrap();
        let s = 1.0; // sqrt(kappa phi)
        for w in sol.chi.windows(2) {
            assert!(w[0] < 0.0);
            assert!(w[0] >= w[1] - 1e-12, "chi must be nonincreasing in t");
            assert!(w[0] >= -10.0 - 1e-9 && w[0] <= -s + 1e-9);
        }
    }

    #[test]
    fn grid_refinement_is_fourth_order() {
        let p = problem(2.0, 5.0, 0.1, 1.0);
        let impact = ImpactModel::new(vec![1.0, 0.5, 0.25], EtaKind::Identity, 0.01, 0.3, 0.05).unwrap();
        let err = |n: usize| -> f64 {
            let grid = TimeGrid::new(1.0, n).unwrap();
            let sol = solve_riccati(&p, &impact, &grid).unwrap();
            let fine = solve_riccati(&p, &impact, &TimeGrid::new(1.0, 8 * n).unwrap()).unwrap();
            sol.chi
                .iter()
                .enumerate()
                .map(|(i, &x)| (x - fine.chi[8 * i]).abs())
                .fold(0.0, f64::max)
        };
        let e1 = err(50);
        let e2 = err(100);
        let ratio = e1 / e2;
        assert!((12.0..=20.0).contains(&ratio), "refinement ratio {ratio} outside [12, 20]");
    }

    #[test]
    fn integrating_factor_identities() {
        let p = problem(1.0, 3.0, 0.0, 1.0);
        let grid = TimeGrid::new(1.0, 4_000).unwrap();
        let sol = solve_riccati(&p, &const_impact(1.0), &grid).unwrap();
        assert_eq!(integrating_factor(&sol, 0.4, 0.4).unwrap(), 1.0);
        assert!(matches!(integrating_factor(&sol, 0.5, 0.4), Err(Error::Domain { .. })));
        // cocycle property
        let a = integrating_factor(&sol, 0.1, 0.6).unwrap();
        let b = integrating_factor(&sol, 0.6, 0.9).unwrap();
        let c = integrating_factor(&sol, 0.1, 0.9).unwrap();
        assert!((a * b - c).abs() < 1e-10);
        // value lies in (0, 1] since X0 < 0
        assert!(a > 0.0 && a <= 1.0);
    }

    #[test]
    fn integrating_factor_constant_chi() {
        // X0 == -1, kappa == 1: factor over [0,1] is e^{-1}.
        let p = problem(1.0, 1.0, 0.0, 1.0); // X_T = -1 = -sqrt(kappa phi), fixed point
        let grid = TimeGrid::new(1.0, 4_000).unwrap();
        let sol = solve_riccati(&p, &const_impact(1.0), &grid).unwrap();
        let f = integrating_factor(&sol, 0.0, 1.0).unwrap();
        assert_abs_diff_eq!(f, (-1.0f64).exp(), epsilon = 1e-10);
    }
}
