//! Singular-cycle construction on the SIRWS critical manifold: the candidate
//! return map (fast heteroclinic followed by the slow passage), the
//! left/crossing/right position of the image section, and the bracketing
//! search in the birth/death rate for a closed orbit.

use serde::{Deserialize, Serialize};

use crate::entry_exit::sirws_exit_point;
use crate::error::{Error, Result};
use crate::maps::{pi1_map, w_infinity};
use crate::model::ModelParams;
use crate::numerics::bisect;

/// Transversal section J1 = {S = s0, I = 0, W in (w_lo, w_hi)} on the
/// repelling part of the critical manifold.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SectionJ1 {
    pub s0: f64,
    pub w_lo: f64,
    pub w_hi: f64,
}

impl SectionJ1 {
    pub fn new(p: &ModelParams, s0: f64, w_lo: f64, w_hi: f64) -> Result<Self> {
        let turn = 1.0 / p.r0();
        if !(s0 > turn && s0 < 1.0) {
            return Err(Error::Domain(format!(
                "J1 needs s0 in (1/r0, 1) = ({turn}, 1), got {s0}"
            )));
        }
        if !(0.0 <= w_lo && w_lo < w_hi && w_hi <= 1.0 - s0) {
            return Err(Error::Domain(format!(
                "J1 needs 0 <= w_lo < w_hi <= 1 - s0, got ({w_lo}, {w_hi})"
            )));
        }
        Ok(Self { s0, w_lo, w_hi })
    }

    /// Section at `s0` spanning the whole admissible W interval, shrunk by
    /// a hair at both ends.
    pub fn spanning(p: &ModelParams, s0: f64) -> Result<Self> {
        let margin = 1e-6 * (1.0 - s0);
        Self::new(p, s0, margin, (1.0 - s0) - margin)
    }

    fn w_grid(&self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|k| self.w_lo + (self.w_hi - self.w_lo) * (k as f64) / ((n - 1) as f64))
            .collect()
    }
}

/// Candidate return map on the critical manifold: the layer heteroclinic
/// from (s0, 0, w) lands at (S_inf, 0, W_inf), then the slow flow runs for
/// the exit time. Returns the exit (S, W).
pub fn candidate_map(p: &ModelParams, s0: f64, w: f64) -> Result<(f64, f64)> {
    let s_inf = pi1_map(p, s0, 0.0)?;
    let w_inf = w_infinity(p, s0, 0.0, w)?;
    let sol = sirws_exit_point(p, s_inf, w_inf)?;
    Ok((sol.exit.s, sol.exit.w))
}

/// Where the image J3 of the section sits relative to J1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum J3Position {
    Left,
    Crossing,
    Right,
}

impl std::fmt::Display for J3Position {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            J3Position::Left => "LEFT",
            J3Position::Crossing => "CROSSING",
            J3Position::Right => "RIGHT",
        })
    }
}

/// One sampled point of the image curve.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct J3Sample {
    pub w: f64,
    pub s_exit: f64,
    pub w_exit: f64,
}

#[derive(Debug, Clone)]
pub struct J3Classification {
    pub position: J3Position,
    pub samples: Vec<J3Sample>,
}

/// Sample the candidate map on a W grid over the section and classify the
/// image: RIGHT/LEFT when the exit S is uniformly beyond/short of s0,
/// CROSSING when the sign of s_exit - s0 changes across the grid.
pub fn classify_j3(p: &ModelParams, j1: &SectionJ1, grid_n: usize) -> Result<J3Classification> {
    if grid_n < 8 {
        return Err(Error::InvalidParams(format!(
            "classification grid needs at least 8 points, got {grid_n}"
        )));
    }
    let samples: Vec<J3Sample> = j1
        .w_grid(grid_n)
        .into_iter()
        .map(|w| {
            let (s_exit, w_exit) = candidate_map(p, j1.s0, w)?;
            Ok(J3Sample { w, s_exit, w_exit })
        })
        .collect::<Result<_>>()?;
    let mut any_right = false;
    let mut any_left = false;
    for s in &samples {
        let d = s.s_exit - j1.s0;
        if d > 0.0 {
            any_right = true;
        } else if d < 0.0 {
            any_left = true;
        } else {
            any_right = true;
            any_left = true;
        }
    }
    let position = match (any_right, any_left) {
        (true, false) => J3Position::Right,
        (false, true) => J3Position::Left,
        _ => J3Position::Crossing,
    };
    Ok(J3Classification { position, samples })
}

/// Default section through the singular attractor: iterate the candidate
/// map until its launch point settles, then span the admissible W range
/// there. The iteration is strongly contracting in S and contracts W along
/// the fast segment, so a few hundred steps pin the fixed point.
pub fn default_section(p: &ModelParams) -> Result<SectionJ1> {
    let turn = 1.0 / p.r0();
    let mut s = (2.0 * turn).min(0.5 * (1.0 + turn));
    let mut w = 0.5 * (1.0 - s);
    let mut converged = false;
    for _ in 0..400 {
        let (s_next, w_next) = candidate_map(p, s, w)?;
        if !(s_next > turn && s_next < 1.0) {
            return Err(Error::Convergence(format!(
                "candidate-map iteration left the section domain at S = {s_next}"
            )));
        }
        let done = (s_next - s).abs() < 1e-12 && (w_next - w).abs() < 1e-12;
        s = s_next;
        w = w_next;
        if done {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Convergence(
            "candidate-map iteration did not settle within 400 steps".into(),
        ));
    }
    SectionJ1::spanning(p, s)
}

/// Result of the cycle search: the parameter value and W coordinate of the
/// reported fixed point, the residuals of both components of the map at it,
/// and the section classifications at the bracket ends.
#[derive(Debug, Clone, Copy)]
pub struct CycleSearchResult {
    pub xi_star: f64,
    pub w_star: f64,
    pub residual_s: f64,
    pub residual_w: f64,
    pub bracket_positions: (J3Position, J3Position),
}

const WBAR_TOL: f64 = 1e-10;
const XI_TOL: f64 = 1e-8;
const XI_GRID: usize = 64;

fn with_xi(p: &ModelParams, xi: f64) -> ModelParams {
    ModelParams { xi, ..*p }
}

/// W coordinate at which the exit S returns exactly to s0, when the image
/// crosses the section at this parameter value.
fn wbar(p: &ModelParams, j1: &SectionJ1) -> Result<Option<f64>> {
    let d = |w: f64| -> Result<f64> { Ok(candidate_map(p, j1.s0, w)?.0 - j1.s0) };
    let d_lo = d(j1.w_lo)?;
    let d_hi = d(j1.w_hi)?;
    if d_lo == 0.0 {
        return Ok(Some(j1.w_lo));
    }
    if d_hi == 0.0 {
        return Ok(Some(j1.w_hi));
    }
    if (d_lo > 0.0) == (d_hi > 0.0) {
        return Ok(None);
    }
    let mut failed = None;
    let root = bisect(
        |w| match d(w) {
            Ok(v) => v,
            Err(e) => {
                failed = Some(e);
                f64::NAN
            }
        },
        j1.w_lo,
        j1.w_hi,
        WBAR_TOL,
    )?;
    if let Some(e) = failed {
        return Err(e);
    }
    Ok(Some(root))
}

/// The closure defect g(xi) = wbar(xi) - F2(s0, wbar(xi)); a zero is a fixed
/// point of the candidate map and hence a singular cycle.
fn g_defect(p: &ModelParams, j1: &SectionJ1, xi: f64) -> Result<Option<(f64, f64)>> {
    let px = with_xi(p, xi);
    match wbar(&px, j1)? {
        None => Ok(None),
        Some(w) => {
            let (_, w_exit) = candidate_map(&px, j1.s0, w)?;
            Ok(Some((w - w_exit, w)))
        }
    }
}

/// Search the bracket for a parameter value at which the candidate map has
/// a fixed point on the section. The bracket ends must classify differently
/// (or hide a crossing inside); the interval where the image crosses the
/// section is located by scanning and edge refinement, then the closure
/// defect is driven to zero by bisection.
pub fn find_singular_cycle(
    p: &ModelParams,
    j1: &SectionJ1,
    xi_bracket: (f64, f64),
) -> Result<CycleSearchResult> {
    let (xi_lo, xi_hi) = xi_bracket;
    if !(xi_lo >= 0.0 && xi_lo < xi_hi) {
        return Err(Error::InvalidParams(format!(
            "bad bracket ({xi_lo}, {xi_hi})"
        )));
    }
    let class_lo = classify_j3(&with_xi(p, xi_lo), j1, 16)?;
    let class_hi = classify_j3(&with_xi(p, xi_hi), j1, 16)?;
    let positions = (class_lo.position, class_hi.position);

    // a bracket end that is already an exact fixed point is the answer
    for (xi, class) in [(xi_lo, &class_lo), (xi_hi, &class_hi)] {
        for s in &class.samples {
            if s.s_exit == j1.s0 && s.w_exit == s.w {
                return Ok(CycleSearchResult {
                    xi_star: xi,
                    w_star: s.w,
                    residual_s: 0.0,
                    residual_w: 0.0,
                    bracket_positions: positions,
                });
            }
        }
    }

    // sample the closure defect where the image crosses the section
    let mut samples: Vec<(f64, f64)> = Vec::new();
    let mut solvable_any = false;
    let mut last: Option<(f64, bool)> = None;
    // solvability edges stored as (solvable end, unsolvable end)
    let mut edges: Vec<(f64, f64)> = Vec::new();
    for k in 0..XI_GRID {
        let xi = xi_lo + (xi_hi - xi_lo) * (k as f64) / ((XI_GRID - 1) as f64);
        let entry = g_defect(p, j1, xi)?;
        let solvable = entry.is_some();
        if let Some((g, _)) = entry {
            samples.push((xi, g));
            solvable_any = true;
        }
        if let Some((xi_prev, s_prev)) = last {
            if s_prev != solvable {
                edges.push(if s_prev { (xi_prev, xi) } else { (xi, xi_prev) });
            }
        }
        last = Some((xi, solvable));
    }
    // refine solvability edges so the defect is sampled right up to the
    // boundary of the crossing window, where it takes its extreme signs
    for (mut solv, mut unsolv) in edges {
        for _ in 0..40 {
            if (solv - unsolv).abs() < XI_TOL {
                break;
            }
            let mid = 0.5 * (solv + unsolv);
            match g_defect(p, j1, mid)? {
                Some((g, _)) => {
                    samples.push((mid, g));
                    solvable_any = true;
                    solv = mid;
                }
                None => unsolv = mid,
            }
        }
    }
    if !solvable_any && samples.is_empty() {
        return Err(Error::Domain(format!(
            "the image never crosses the section inside ({xi_lo}, {xi_hi}); \
             ends classify as {} / {}",
            positions.0, positions.1
        )));
    }
    samples.sort_by(|a, b| a.0.total_cmp(&b.0));
    let pair = samples
        .windows(2)
        .find(|w| w[0].1 * w[1].1 < 0.0)
        .map(|w| (w[0], w[1]));
    let ((mut a, mut ga), (mut b, _gb)) = match pair {
        Some(p) => p,
        None => {
            let (lo, hi) = (samples.first().unwrap().0, samples.last().unwrap().0);
            return Err(Error::Convergence(format!(
                "closure defect keeps one sign on the crossing window [{lo:.8}, {hi:.8}] \
                 (shrunk from ({xi_lo}, {xi_hi})); no cycle in this bracket"
            )));
        }
    };
    // bisection in xi; the window between two solvable samples stays solvable
    while (b - a).abs() > XI_TOL {
        let mid = 0.5 * (a + b);
        match g_defect(p, j1, mid)? {
            Some((g, _)) => {
                if g == 0.0 {
                    a = mid;
                    b = mid;
                    break;
                }
                if (g > 0.0) == (ga > 0.0) {
                    a = mid;
                    ga = g;
                } else {
                    b = mid;
                }
            }
            None => {
                return Err(Error::Convergence(format!(
                    "crossing window collapsed during refinement near xi = {mid}"
                )))
            }
        }
    }
    let xi_star = 0.5 * (a + b);
    let px = with_xi(p, xi_star);
    let w_star = wbar(&px, j1)?.ok_or_else(|| {
        Error::Convergence(format!("no section crossing at the reported xi = {xi_star}"))
    })?;
    let (s_exit, w_exit) = candidate_map(&px, j1.s0, w_star)?;
    let result = CycleSearchResult {
        xi_star,
        w_star,
        residual_s: (s_exit - j1.s0).abs(),
        residual_w: (w_exit - w_star).abs(),
        bracket_positions: positions,
    };
    if result.residual_s >= 1e-6 || result.residual_w >= 1e-6 {
        return Err(Error::Convergence(format!(
            "cycle residuals too large: |dS| = {:.3e}, |dW| = {:.3e}",
            result.residual_s, result.residual_w
        )));
    }
    Ok(result)
}
