//! Exit points and exit times past the loss of normal hyperbolicity at
//! S = 1/r0: the explicit SIR/SIRS exit root, a generic quadrature-based
//! entry-exit map, and the SIRWS slow-flow solution with its exit-time
//! equation.

use crate::error::{Error, Result};
use crate::model::{ModelParams, SystemState};
use crate::numerics::{adaptive_simpson, brent, DEFAULT_REL_TOL};

/// Quadrature tolerance for the generic entry-exit integral.
const QUAD_TOL: f64 = 1e-12;
/// Exit-time bracketing cap in slow time.
const EXIT_TIME_CAP: f64 = 1e4;

/// Entry/exit pair on the critical manifold together with the residual of
/// the defining root equation. `exit_time` is populated for SIRWS, where
/// the exit condition is a time equation rather than an explicit point map.
#[derive(Debug, Clone, Copy)]
pub struct EntryExitSolution {
    pub entry: SystemState,
    pub exit: SystemState,
    pub exit_time: Option<f64>,
    pub residual: f64,
}

/// Coefficients of the explicit SIRWS slow-flow solution
/// S(tau) = 1 + (C + B tau) e^(-A tau):
/// A = 2 kappa + xi, B = 2 kappa (S_inf + W_inf - 1), C = S_inf - 1.
#[derive(Debug, Clone, Copy)]
pub struct SlowFlowCoefficients {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl SlowFlowCoefficients {
    /// Build from a feasible entry point (components non-negative, total
    /// at most 1, strictly inside S < 1).
    pub fn new(p: &ModelParams, s_inf: f64, w_inf: f64) -> Result<Self> {
        check_feasible_entry(s_inf, w_inf)?;
        let a = 2.0 * p.kappa + p.xi;
        if !(a > 0.0) {
            return Err(Error::Domain(
                "slow flow needs 2 kappa + xi > 0 to relax toward S = 1".into(),
            ));
        }
        Ok(Self {
            a,
            b: 2.0 * p.kappa * (s_inf + w_inf - 1.0),
            c: s_inf - 1.0,
        })
    }
}

fn check_feasible_entry(s_inf: f64, w_inf: f64) -> Result<()> {
    if !(s_inf >= 0.0 && w_inf >= 0.0 && s_inf + w_inf <= 1.0 && s_inf < 1.0) {
        return Err(Error::Domain(format!(
            "entry point (S, W) = ({s_inf}, {w_inf}) is outside the feasible triangle"
        )));
    }
    Ok(())
}

/// Exit point of the SIR (and SIRS, which obeys the identical integral) past
/// the turning point: the unique root greater than `p0` of
/// F(x) = x - p0 + (1 - 1/r0) ln((1-x)/(1-p0)), lying in (1/r0, 1).
pub fn sir_exit_point(p: &ModelParams, p0: f64) -> Result<f64> {
    p.require_endemic()?;
    let turn = 1.0 / p.r0();
    if !(p0 > 0.0 && p0 < turn) {
        return Err(Error::Domain(format!(
            "exit point requires p0 in (0, 1/r0) = (0, {turn}), got {p0}"
        )));
    }
    let coeff = 1.0 - turn;
    let f = |x: f64| x - p0 + coeff * ((1.0 - x) / (1.0 - p0)).ln();
    // F rises from 0 at p0 to its maximum at the turning point, then falls
    // to -inf at 1; bracket on (1/r0, 1).
    let lo = turn;
    let mut gap = 1e-12;
    while f(1.0 - gap) > 0.0 {
        gap *= 1e-2;
        if gap < 1e-300 {
            return Err(Error::Bracket("exit point bracket collapsed at x = 1".into()));
        }
    }
    if f(lo) <= 0.0 {
        // entry at the turning point exits immediately
        return Ok(turn);
    }
    brent(f, lo, 1.0 - gap, DEFAULT_REL_TOL)
}

/// Generic entry-exit map for a planar system x' = f(y) x, y' = eps g(y)
/// near the critical manifold x = 0: the exit height p0(y0) is the positive
/// root of the cumulative integral of f/g from y0.
///
/// `f` and `g` are sampled on [y0, y_max] to check the standing hypotheses
/// (g > 0, sign f = sign y); violations are reported rather than integrated
/// over. Returns a no-exit error when the integral stays negative up to
/// `y_max`.
pub fn generic_entry_exit<F, G>(f: F, g: G, y0: f64, y_max: f64) -> Result<f64>
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    if !(y0 < 0.0) {
        return Err(Error::Domain(format!("entry must have y0 < 0, got {y0}")));
    }
    if !(y_max > 0.0) {
        return Err(Error::Domain(format!("upper bound must be positive, got {y_max}")));
    }
    let n = 257;
    for k in 0..n {
        let y = y0 + (y_max - y0) * (k as f64) / ((n - 1) as f64);
        let gv = g(y);
        if !(gv > 0.0) {
            return Err(Error::Hypothesis(format!(
                "g({y}) = {gv} is not positive on the integration range"
            )));
        }
        let fv = f(y);
        if y.abs() > 1e-9 * (y_max - y0) && fv * y <= 0.0 {
            return Err(Error::Hypothesis(format!(
                "f({y}) = {fv} does not carry the sign of y"
            )));
        }
    }
    let integrand = |y: f64| f(y) / g(y);
    let head = adaptive_simpson(&integrand, y0, 0.0, QUAD_TOL)?;
    if !(head < 0.0) {
        return Err(Error::Hypothesis(format!(
            "attraction integral over [{y0}, 0] is {head:.3e}, expected negative"
        )));
    }
    let phi = |y: f64| -> f64 {
        head + adaptive_simpson(&integrand, 0.0, y, QUAD_TOL).unwrap_or(f64::NAN)
    };
    let tail = phi(y_max);
    if !tail.is_finite() {
        return Err(Error::Convergence("entry-exit integral did not converge".into()));
    }
    if tail < 0.0 {
        return Err(Error::NoExit(format!(
            "repulsion accumulated by y = {y_max} ({tail:.3e}) never cancels the attraction"
        )));
    }
    brent(phi, 0.0, y_max, 1e-12)
}

/// Explicit solution of the reduced SIRWS flow started at a feasible entry
/// (S_inf, W_inf): S(tau) = 1 + (C + B tau) e^(-A tau),
/// W(tau) = (W_inf - B tau) e^(-A tau).
pub fn slow_flow_solution(
    p: &ModelParams,
    s_inf: f64,
    w_inf: f64,
    tau: f64,
) -> Result<(f64, f64)> {
    if !(tau >= 0.0) {
        return Err(Error::Domain(format!("tau must be non-negative, got {tau}")));
    }
    let k = SlowFlowCoefficients::new(p, s_inf, w_inf)?;
    Ok(slow_flow_at(&k, w_inf, tau))
}

#[inline]
fn slow_flow_at(k: &SlowFlowCoefficients, w_inf: f64, tau: f64) -> (f64, f64) {
    let decay = (-k.a * tau).exp();
    (1.0 + (k.c + k.b * tau) * decay, (w_inf - k.b * tau) * decay)
}

/// Accumulated attraction/repulsion integral of r0 S(tau) - 1 from 0 to T,
/// written with expm1 so the small-T regime does not cancel.
#[inline]
fn exit_integral(r0: f64, k: &SlowFlowCoefficients, t: f64) -> f64 {
    let a = k.a;
    (r0 - 1.0) * t
        + r0 / (a * a)
            * (-(a * k.c + k.b) * (-a * t).exp_m1() - a * k.b * t * (-a * t).exp())
}

/// The unique strictly positive zero of the accumulated integral: the slow
/// time a trajectory spends pinned to the critical manifold before the
/// built-up attraction is paid off.
///
/// Requires an entry on the attracting side, s_inf < 1/r0. The bracket
/// starts at machine scale and doubles until the integral changes sign,
/// capped at slow time 1e4.
pub fn exit_time(p: &ModelParams, s_inf: f64, w_inf: f64) -> Result<f64> {
    p.require_endemic()?;
    let r0 = p.r0();
    if !(s_inf < 1.0 / r0) {
        return Err(Error::Domain(format!(
            "exit time needs an attracting entry s_inf < 1/r0 = {}, got {s_inf}",
            1.0 / r0
        )));
    }
    let k = SlowFlowCoefficients::new(p, s_inf, w_inf)?;
    let phi = |t: f64| exit_integral(r0, &k, t);
    let mut hi = f64::EPSILON;
    while phi(hi) <= 0.0 {
        hi *= 2.0;
        if hi > EXIT_TIME_CAP {
            return Err(Error::NoExit(format!(
                "no sign change of the exit integral below tau = {EXIT_TIME_CAP}"
            )));
        }
    }
    brent(phi, 0.5 * hi, hi, 1e-14)
}

/// Exit point of the SIRWS slow passage: the slow-flow solution evaluated
/// at the exit time, with the residual of the defining time equation.
pub fn sirws_exit_point(p: &ModelParams, s_inf: f64, w_inf: f64) -> Result<EntryExitSolution> {
    let t_e = exit_time(p, s_inf, w_inf)?;
    let k = SlowFlowCoefficients::new(p, s_inf, w_inf)?;
    let (s_exit, w_exit) = slow_flow_at(&k, w_inf, t_e);
    Ok(EntryExitSolution {
        entry: SystemState::sirws(s_inf, 0.0, w_inf),
        exit: SystemState::sirws(s_exit, 0.0, w_exit),
        exit_time: Some(t_e),
        residual: exit_integral(p.r0(), &k, t_e).abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{reduced_field, ModelKind, ModelParams, SystemState};
    use approx::assert_relative_eq;

    fn sir2() -> ModelParams {
        ModelParams::sir(2.0, 1.0, 1.0, 1e-3)
    }

    fn pertussis_slow(xi: f64) -> ModelParams {
        ModelParams::sirws(260.0, 17.0, xi, 0.1, 5.0, 1.0)
    }

    /// Test-side quadrature oracle, independent of the adaptive scheme used
    /// by the implementation: composite Simpson on a fixed fine grid.
    fn simpson_fixed<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / (n as f64);
        let mut acc = f(a) + f(b);
        for k in 1..n {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(a + h * (k as f64));
        }
        acc * h / 3.0
    }

    #[test]
    fn sir_exit_frozen_regression_value() {
        let s1 = sir_exit_point(&sir2(), 0.25).unwrap();
        assert_relative_eq!(s1, 0.68710873289935853953, max_relative = 1e-12);
        assert!(s1 > 0.5 && s1 < 1.0);
    }

    #[test]
    fn sir_exit_degenerates_at_turning_point() {
        let s1 = sir_exit_point(&sir2(), 0.5 - 1e-12).unwrap();
        assert_relative_eq!(s1, 0.5, epsilon = 1e-5);
    }

    #[test]
    fn sir_exit_integral_consistency() {
        // the exit root makes the attraction/repulsion integral vanish:
        // int_{u0}^{u1} u/(r0-1-u) du = 0 with u = r0 S - 1
        let p = sir2();
        let r0 = p.r0();
        let p0 = 0.25;
        let s1 = sir_exit_point(&p, p0).unwrap();
        let (u0, u1) = (r0 * p0 - 1.0, r0 * s1 - 1.0);
        let v = simpson_fixed(|u| u / (r0 - 1.0 - u), u0, u1, 20_000);
        assert!(v.abs() < 1e-9, "integral residual {v:.3e}");
    }

    #[test]
    fn sir_exit_domain_errors() {
        let p = sir2();
        assert!(matches!(sir_exit_point(&p, 0.6), Err(Error::Domain(_))));
        assert!(matches!(sir_exit_point(&p, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn generic_map_symmetric_cases() {
        let p0 = generic_entry_exit(|y| y, |_| 1.0, -0.5, 2.0).unwrap();
        assert_relative_eq!(p0, 0.5, epsilon = 1e-10);
        // odd f, even g
        let p0 = generic_entry_exit(|y| y * y * y, |y| 1.0 + y * y, -0.7, 2.0).unwrap();
        assert_relative_eq!(p0, 0.7, epsilon = 1e-9);
    }

    #[test]
    fn generic_map_matches_explicit_sir_root() {
        // u = r0 S - 1 turns the SIR passage into the scalar normal form
        let p = sir2();
        let r0 = p.r0();
        let s1 = sir_exit_point(&p, 0.25).unwrap();
        let u_exit =
            generic_entry_exit(|u| p.gamma * u, |u| r0 - 1.0 - u, -0.5, 0.98).unwrap();
        assert!((u_exit - (r0 * s1 - 1.0)).abs() < 1e-9);
    }

    #[test]
    fn generic_map_checks_hypotheses() {
        assert!(matches!(
            generic_entry_exit(|y| y, |y| y, -0.5, 1.0),
            Err(Error::Hypothesis(_))
        ));
        assert!(matches!(
            generic_entry_exit(|y| -y, |_| 1.0, -0.5, 1.0),
            Err(Error::Hypothesis(_))
        ));
        assert!(matches!(
            generic_entry_exit(|y| y, |_| 1.0, -0.5, 0.2),
            Err(Error::NoExit(_))
        ));
        assert!(matches!(
            generic_entry_exit(|y| y, |_| 1.0, 0.5, 1.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn slow_flow_initial_and_asymptotic_values() {
        let p = pertussis_slow(0.0125);
        let (s, w) = slow_flow_solution(&p, 0.05, 0.2, 0.0).unwrap();
        assert_relative_eq!(s, 0.05, epsilon = 1e-14);
        assert_relative_eq!(w, 0.2, epsilon = 1e-14);
        let (s, w) = slow_flow_solution(&p, 0.05, 0.2, 500.0).unwrap();
        assert_relative_eq!(s, 1.0, epsilon = 1e-12);
        assert!(w.abs() < 1e-12);
    }

    #[test]
    fn slow_flow_matches_reduced_field_derivative() {
        let p = pertussis_slow(0.0125);
        let (s_inf, w_inf) = (0.05, 0.2);
        let tau = 3.0;
        let h = 1e-6;
        let (sp, _) = slow_flow_solution(&p, s_inf, w_inf, tau + h).unwrap();
        let (sm, _) = slow_flow_solution(&p, s_inf, w_inf, tau - h).unwrap();
        let fd = (sp - sm) / (2.0 * h);
        let (s, w) = slow_flow_solution(&p, s_inf, w_inf, tau).unwrap();
        let f = reduced_field(ModelKind::Sirws, &p, SystemState::sirws(s, 0.0, w)).unwrap();
        assert!((fd - f[0]).abs() < 1e-6, "fd {fd} vs field {}", f[0]);
    }

    #[test]
    fn slow_flow_rejects_infeasible_entries() {
        let p = pertussis_slow(0.0125);
        assert!(matches!(
            slow_flow_solution(&p, 0.7, 0.5, 1.0),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            slow_flow_solution(&p, -0.1, 0.2, 1.0),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            slow_flow_solution(&p, 0.1, 0.2, -1.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn exit_time_frozen_regression_value() {
        let p = pertussis_slow(0.0125);
        let te = exit_time(&p, 0.02, 0.1).unwrap();
        assert_relative_eq!(te, 1.9007282093764455, max_relative = 1e-10);
    }

    #[test]
    fn exit_time_quadrature_cross_check() {
        // independent oracle: fixed-grid Simpson of r0 S(tau) - 1 must vanish
        // at the reported exit time
        let p = pertussis_slow(0.0125);
        let r0 = p.r0();
        let te = exit_time(&p, 0.02, 0.1).unwrap();
        let s_of = |tau: f64| slow_flow_solution(&p, 0.02, 0.1, tau).unwrap().0;
        let v = simpson_fixed(|tau| r0 * s_of(tau) - 1.0, 0.0, te, 20_000);
        assert!(v.abs() < 1e-9, "integral at T_E is {v:.3e}");
    }

    #[test]
    fn exit_time_vanishes_at_marginal_entry() {
        let p = pertussis_slow(0.0125);
        let turn = 1.0 / p.r0();
        let te = exit_time(&p, turn - 1e-9, 0.1).unwrap();
        assert!(te < 1e-6, "T_E = {te}");
    }

    #[test]
    fn exit_time_decreases_with_birth_rate() {
        let mut prev = f64::INFINITY;
        for xi in [0.008, 0.01, 0.0125, 0.015, 0.02] {
            let te = exit_time(&pertussis_slow(xi), 0.02, 0.1).unwrap();
            assert!(te < prev, "T_E not decreasing at xi = {xi}");
            prev = te;
        }
    }

    #[test]
    fn exit_time_domain_errors() {
        let p = pertussis_slow(0.0125);
        assert!(matches!(exit_time(&p, 0.2, 0.1), Err(Error::Domain(_))));
        let frozen = ModelParams::sirws(260.0, 17.0, 0.0, 0.0, 5.0, 1.0);
        assert!(matches!(exit_time(&frozen, 0.02, 0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn sirws_exit_point_composition() {
        let p = pertussis_slow(0.0125);
        let sol = sirws_exit_point(&p, 0.02, 0.1).unwrap();
        assert!(sol.exit.s > 1.0 / p.r0());
        assert!(sol.residual < 1e-10);
        assert_relative_eq!(sol.exit.s, 0.1222793947555153, max_relative = 1e-9);
        assert_relative_eq!(sol.exit.w, 0.29013781069619565, max_relative = 1e-9);
        assert_eq!(sol.entry.s, 0.02);

        // boosting ratio only enters the fast map, never the slow passage
        let other_nu = ModelParams { nu: 40.0, ..p };
        let sol2 = sirws_exit_point(&other_nu, 0.02, 0.1).unwrap();
        assert_eq!(sol.exit_time, sol2.exit_time);
        assert_eq!(sol.exit.s, sol2.exit.s);

        // marginal entry returns the entry point
        let turn = 1.0 / p.r0();
        let near = sirws_exit_point(&p, turn - 1e-10, 0.1).unwrap();
        assert_relative_eq!(near.exit.s, near.entry.s, epsilon = 1e-6);
    }
}
