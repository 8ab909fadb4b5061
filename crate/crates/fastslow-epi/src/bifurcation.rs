//! Equilibrium spectra, one-parameter Hopf scans with bisection refinement,
//! simulation-based attractor classification, and the SIR Lyapunov decrement
//! check.

use nalgebra::Matrix3;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{endemic_equilibrium, jacobian, ModelKind, ModelParams, SystemState, TimeFrame};
use crate::orbit::{integrate, IntegratorConfig};

/// Absolute I-amplitude separating a settled point from a sustained cycle.
pub const AMP_TOL: f64 = 1e-4;
/// Imaginary parts below this (relative to the eigenvalue size) count as real.
const IM_TOL: f64 = 1e-9;
/// Bisection width for Hopf refinement, absolute in the parameter.
const HOPF_PARAM_TOL: f64 = 1e-8;

/// Parameter axis a scan can sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanParam {
    Beta,
    Gamma,
    Xi,
    Kappa,
    Nu,
    Delta,
    Epsilon,
}

impl ScanParam {
    pub fn apply(self, p: &ModelParams, value: f64) -> ModelParams {
        let mut q = *p;
        match self {
            ScanParam::Beta => q.beta = value,
            ScanParam::Gamma => q.gamma = value,
            ScanParam::Xi => q.xi = value,
            ScanParam::Kappa => q.kappa = value,
            ScanParam::Nu => q.nu = value,
            ScanParam::Delta => q.delta = value,
            ScanParam::Epsilon => q.epsilon = value,
        }
        q
    }

    pub fn name(self) -> &'static str {
        match self {
            ScanParam::Beta => "beta",
            ScanParam::Gamma => "gamma",
            ScanParam::Xi => "xi",
            ScanParam::Kappa => "kappa",
            ScanParam::Nu => "nu",
            ScanParam::Delta => "delta",
            ScanParam::Epsilon => "epsilon",
        }
    }
}

impl std::str::FromStr for ScanParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "beta" => ScanParam::Beta,
            "gamma" => ScanParam::Gamma,
            "xi" => ScanParam::Xi,
            "kappa" => ScanParam::Kappa,
            "nu" => ScanParam::Nu,
            "delta" => ScanParam::Delta,
            "epsilon" | "eps" => ScanParam::Epsilon,
            other => return Err(Error::Config(format!("unknown scan parameter `{other}`"))),
        })
    }
}

/// Eigenvalues of the fast-frame Jacobian at the endemic equilibrium,
/// sorted by descending real part. The planar kinds use the trace and
/// determinant directly; the SIRWS cubic goes through its companion matrix
/// so no closed-form branch selection is involved.
pub fn equilibrium_spectrum(kind: ModelKind, p: &ModelParams) -> Result<Vec<Complex64>> {
    let eq = endemic_equilibrium(kind, p)?;
    let j = jacobian(kind, TimeFrame::Fast, p, eq)?;
    let mut eigs = match kind.dim() {
        2 => {
            let (a, b, c, d) = (j[0][0], j[0][1], j[1][0], j[1][1]);
            let tr = a + d;
            let det = a * d - b * c;
            let disc = tr * tr - 4.0 * det;
            if disc >= 0.0 {
                let sq = disc.sqrt();
                vec![
                    Complex64::new(0.5 * (tr + sq), 0.0),
                    Complex64::new(0.5 * (tr - sq), 0.0),
                ]
            } else {
                let om = (-disc).sqrt() * 0.5;
                vec![
                    Complex64::new(0.5 * tr, om),
                    Complex64::new(0.5 * tr, -om),
                ]
            }
        }
        _ => {
            // characteristic cubic  l^3 - T l^2 + M l - D
            let t = j[0][0] + j[1][1] + j[2][2];
            let m = j[0][0] * j[1][1] - j[0][1] * j[1][0]
                + j[0][0] * j[2][2] - j[0][2] * j[2][0]
                + j[1][1] * j[2][2] - j[1][2] * j[2][1];
            let d = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
                - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
            let companion = Matrix3::new(
                0.0, 0.0, d, //
                1.0, 0.0, -m, //
                0.0, 1.0, t,
            );
            companion.complex_eigenvalues().iter().copied().collect()
        }
    };
    eigs.sort_by(|a, b| b.re.total_cmp(&a.re).then(b.im.total_cmp(&a.im)));
    Ok(eigs)
}

/// Real part of the leading complex-conjugate pair, `None` when the
/// spectrum is entirely real.
fn leading_pair_re(kind: ModelKind, p: &ModelParams) -> Result<Option<f64>> {
    let eigs = equilibrium_spectrum(kind, p)?;
    Ok(eigs
        .iter()
        .filter(|e| e.im.abs() > IM_TOL * e.norm().max(1.0))
        .map(|e| e.re)
        .fold(None, |acc: Option<f64>, re| Some(acc.map_or(re, |a| a.max(re)))))
}

/// A refined Hopf crossing.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct HopfPoint {
    pub param: ScanParam,
    pub value: f64,
    /// Member of the crossing pair with non-negative imaginary part.
    pub eigenvalue: Complex64,
    /// Sign of the real-part slope across the crossing: +1 destabilizing.
    pub direction: i8,
}

/// Scan outcome: refined crossings plus any brackets where the pair turned
/// real mid-refinement and the crossing could not be certified.
#[derive(Debug, Clone, Default)]
pub struct HopfScan {
    pub points: Vec<HopfPoint>,
    pub undecided: Vec<(f64, f64)>,
}

/// Sweep one parameter over a uniform grid, watch the leading complex
/// pair's real part, and refine every sign change by bisection to 1e-8 in
/// the parameter. Grid points are evaluated concurrently; output order
/// follows the grid.
pub fn hopf_scan(
    kind: ModelKind,
    p: &ModelParams,
    param: ScanParam,
    range: (f64, f64),
    steps: usize,
) -> Result<HopfScan> {
    if steps < 16 {
        return Err(Error::InvalidParams(format!(
            "scan needs at least 16 grid points, got {steps}"
        )));
    }
    let (lo, hi) = range;
    if !(lo < hi) {
        return Err(Error::InvalidParams(format!("bad scan range ({lo}, {hi})")));
    }
    let grid: Vec<f64> = (0..steps)
        .map(|k| lo + (hi - lo) * (k as f64) / ((steps - 1) as f64))
        .collect();
    let res: Vec<Option<f64>> = grid
        .par_iter()
        .map(|&v| leading_pair_re(kind, &param.apply(p, v)).ok().flatten())
        .collect();

    let mut scan = HopfScan::default();
    for k in 0..steps - 1 {
        let (Some(ra), Some(rb)) = (res[k], res[k + 1]) else {
            continue;
        };
        if ra == 0.0 || ra * rb >= 0.0 {
            continue;
        }
        let (mut a, mut b) = (grid[k], grid[k + 1]);
        let mut ga = ra;
        let mut undecided = false;
        while (b - a).abs() > HOPF_PARAM_TOL {
            let mid = 0.5 * (a + b);
            match leading_pair_re(kind, &param.apply(p, mid))? {
                None => {
                    scan.undecided.push((a, b));
                    undecided = true;
                    break;
                }
                Some(g) => {
                    if (g > 0.0) == (ga > 0.0) {
                        a = mid;
                        ga = g;
                    } else {
                        b = mid;
                    }
                }
            }
        }
        if undecided {
            continue;
        }
        let at = 0.5 * (a + b);
        let eig = equilibrium_spectrum(kind, &param.apply(p, at))?
            .into_iter()
            .filter(|e| e.im > IM_TOL * e.norm().max(1.0))
            .max_by(|x, y| x.re.total_cmp(&y.re))
            .ok_or_else(|| {
                Error::Convergence(format!("pair vanished at refined point {at}"))
            })?;
        scan.points.push(HopfPoint {
            param,
            value: at,
            eigenvalue: eig,
            direction: if rb > ra { 1 } else { -1 },
        });
    }
    Ok(scan)
}

/// Attractor tag assigned to a parameter point or a single trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AttractorTag {
    Point,
    Cycle,
    Bistable,
    Undecided,
}

impl std::fmt::Display for AttractorTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttractorTag::Point => "POINT",
            AttractorTag::Cycle => "CYCLE",
            AttractorTag::Bistable => "BISTABLE",
            AttractorTag::Undecided => "UNDECIDED",
        })
    }
}

/// Post-transient evidence for one initial condition.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct IcEvidence {
    pub initial: SystemState,
    /// Peak-to-peak I amplitude over the post-transient window.
    pub amplitude: f64,
    pub tag: AttractorTag,
}

#[derive(Debug, Clone)]
pub struct AttractorLabel {
    pub tag: AttractorTag,
    pub evidence: Vec<IcEvidence>,
}

/// Classify the attractor by integrating past the transient from at least
/// two initial conditions (one near the equilibrium, one far, by
/// convention). POINT: the I oscillation settles below `AMP_TOL`. CYCLE:
/// the amplitude stays above it without drifting between window halves.
/// Initial conditions that disagree yield BISTABLE; anything else is
/// UNDECIDED. `horizon` is slow time; `transient_fraction` of it is
/// discarded.
pub fn attractor_classify(
    kind: ModelKind,
    p: &ModelParams,
    initial_conditions: &[SystemState],
    horizon: f64,
    transient_fraction: f64,
) -> Result<AttractorLabel> {
    if initial_conditions.len() < 2 {
        return Err(Error::InvalidParams(
            "attractor classification needs at least two initial conditions".into(),
        ));
    }
    if !(0.0..1.0).contains(&transient_fraction) {
        return Err(Error::InvalidParams(format!(
            "transient fraction {transient_fraction} must lie in [0, 1)"
        )));
    }
    let cfg = IntegratorConfig {
        horizon,
        ..IntegratorConfig::default()
    };
    let evidence: Vec<IcEvidence> = initial_conditions
        .par_iter()
        .map(|&ic| classify_one(kind, p, ic, &cfg, transient_fraction))
        .collect();

    let any_point = evidence.iter().any(|e| e.tag == AttractorTag::Point);
    let any_cycle = evidence.iter().any(|e| e.tag == AttractorTag::Cycle);
    let any_undecided = evidence.iter().any(|e| e.tag == AttractorTag::Undecided);
    let tag = match (any_point, any_cycle) {
        (true, true) => AttractorTag::Bistable,
        (true, false) if !any_undecided => AttractorTag::Point,
        (false, true) if !any_undecided => AttractorTag::Cycle,
        _ => AttractorTag::Undecided,
    };
    Ok(AttractorLabel { tag, evidence })
}

fn classify_one(
    kind: ModelKind,
    p: &ModelParams,
    ic: SystemState,
    cfg: &IntegratorConfig,
    transient_fraction: f64,
) -> IcEvidence {
    let traj = match integrate(kind, p, ic, TimeFrame::Slow, cfg, &[]) {
        Ok(t) => t,
        Err(_) => {
            return IcEvidence { initial: ic, amplitude: f64::NAN, tag: AttractorTag::Undecided }
        }
    };
    let t_cut = transient_fraction * cfg.horizon;
    let window: Vec<(f64, f64)> = traj
        .times
        .iter()
        .zip(&traj.states)
        .filter(|(t, _)| **t >= t_cut)
        .map(|(t, x)| (*t, x.i))
        .collect();
    if window.len() < 8 {
        return IcEvidence { initial: ic, amplitude: f64::NAN, tag: AttractorTag::Undecided };
    }
    let amp_of = |slice: &[(f64, f64)]| -> f64 {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for (_, i) in slice {
            min = min.min(*i);
            max = max.max(*i);
        }
        max - min
    };
    let amplitude = amp_of(&window);
    let tag = if amplitude < AMP_TOL {
        AttractorTag::Point
    } else {
        let mid = window.len() / 2;
        let amp1 = amp_of(&window[..mid]);
        let amp2 = amp_of(&window[mid..]);
        let peaks = window
            .windows(3)
            .filter(|w| w[1].1 > w[0].1 && w[1].1 > w[2].1 && w[1].1 > AMP_TOL)
            .count();
        let steady =
            amp1 > AMP_TOL && amp2 > AMP_TOL && amp2 / amp1 > 0.5 && amp2 / amp1 < 2.0;
        if steady && peaks >= 2 {
            AttractorTag::Cycle
        } else if amp2 < AMP_TOL {
            // still ringing down at the window start but settled by the end
            AttractorTag::Point
        } else {
            AttractorTag::Undecided
        }
    };
    IcEvidence { initial: ic, amplitude, tag }
}

/// Default pair of probe states for a classification at these parameters:
/// a small relative kick off the equilibrium, and a far state with most of
/// the population susceptible.
pub fn default_probe_states(kind: ModelKind, p: &ModelParams) -> Result<Vec<SystemState>> {
    let eq = endemic_equilibrium(kind, p)?;
    let near = SystemState {
        s: eq.s * 1.001,
        i: eq.i * 1.001,
        w: eq.w,
    };
    let far = match kind {
        ModelKind::Sirws => SystemState::sirws(0.9, 1e-4, 0.05),
        _ => SystemState::planar(0.9, 1e-4),
    };
    Ok(vec![near, far])
}

/// The SIR Lyapunov value L1 = S + I - S_E ln S - I_E ln I - C_E, zero at
/// the endemic equilibrium and non-increasing along SIR orbits.
pub fn lyapunov_l1(p: &ModelParams, s: f64, i: f64) -> Result<f64> {
    if !(s > 0.0 && i > 0.0) {
        return Err(Error::Domain(format!(
            "L1 needs positive coordinates, got ({s}, {i})"
        )));
    }
    let eq = endemic_equilibrium(ModelKind::Sir, p)?;
    let c_e = eq.s + eq.i - eq.s * eq.s.ln() - eq.i * eq.i.ln();
    Ok(s + i - eq.s * s.ln() - eq.i * i.ln() - c_e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sir2() -> ModelParams {
        ModelParams::sir(2.0, 1.0, 1.0, 1e-3)
    }

    fn pertussis(xi: f64, nu: f64, eps: f64) -> ModelParams {
        ModelParams::sirws(260.0, 17.0, xi, 0.1, nu, eps)
    }

    #[test]
    fn sir_spectrum_is_a_stable_spiral() {
        let eigs = equilibrium_spectrum(ModelKind::Sir, &sir2()).unwrap();
        assert_eq!(eigs.len(), 2);
        assert!(eigs[0].im != 0.0 && eigs[0].re < 0.0);
        assert_eq!(eigs[0].re, eigs[1].re);
        assert_eq!(eigs[0].im, -eigs[1].im);
    }

    #[test]
    fn planar_eigenvalues_obey_vieta() {
        let p = sir2();
        let eq = endemic_equilibrium(ModelKind::Sir, &p).unwrap();
        let j = jacobian(ModelKind::Sir, TimeFrame::Fast, &p, eq).unwrap();
        let eigs = equilibrium_spectrum(ModelKind::Sir, &p).unwrap();
        let sum = eigs[0] + eigs[1];
        let prod = eigs[0] * eigs[1];
        assert_relative_eq!(sum.re, j[0][0] + j[1][1], max_relative = 1e-12);
        assert!((sum.im).abs() < 1e-14);
        assert_relative_eq!(
            prod.re,
            j[0][0] * j[1][1] - j[0][1] * j[1][0],
            max_relative = 1e-12
        );
    }

    #[test]
    fn sirws_pair_is_unstable_between_the_hopf_points() {
        let eigs = equilibrium_spectrum(ModelKind::Sirws, &pertussis(0.0125, 5.0, 1.0)).unwrap();
        // frozen from an independent eigensolve of the analytic Jacobian
        assert_relative_eq!(eigs[0].re, 0.05932716044973335, max_relative = 1e-6);
        assert_relative_eq!(eigs[0].im.abs(), 2.9001194079837025, max_relative = 1e-6);
        assert_relative_eq!(eigs[2].re, -3.004268980595786, max_relative = 1e-6);
    }

    #[test]
    fn hopf_scan_reproduces_the_two_crossings() {
        let p = pertussis(0.01, 5.0, 1.0);
        let scan = hopf_scan(ModelKind::Sirws, &p, ScanParam::Nu, (0.5, 200.0), 64).unwrap();
        assert_eq!(scan.points.len(), 2, "points: {:?}", scan.points);
        assert!(scan.undecided.is_empty());
        let (h1, h2) = (&scan.points[0], &scan.points[1]);
        assert_relative_eq!(h1.value, 1.7898541184632908, max_relative = 1e-6);
        assert_relative_eq!(h2.value, 19.39175885731762, max_relative = 1e-6);
        assert_eq!(h1.direction, 1);
        assert_eq!(h2.direction, -1);
        for pt in &scan.points {
            assert!(pt.eigenvalue.re.abs() < 1e-8, "residual {:.2e}", pt.eigenvalue.re);
            assert!(pt.eigenvalue.im > 0.0);
        }
        // stability of the scan under grid refinement
        let fine = hopf_scan(ModelKind::Sirws, &p, ScanParam::Nu, (0.5, 200.0), 128).unwrap();
        assert_eq!(fine.points.len(), 2);
        assert_relative_eq!(fine.points[0].value, h1.value, epsilon = 1e-6);
        assert_relative_eq!(fine.points[1].value, h2.value, epsilon = 1e-6);
    }

    #[test]
    fn scan_handles_merged_pairs_without_fabricating_points() {
        // near r0 = 1.1 the SIR spiral degenerates into a node as epsilon
        // grows; the scan must cope with the pair disappearing
        let p = ModelParams::sir(1.1, 1.0, 1.0, 0.05);
        let scan = hopf_scan(ModelKind::Sir, &p, ScanParam::Epsilon, (0.02, 0.12), 32).unwrap();
        assert!(scan.points.is_empty());
    }

    #[test]
    fn scan_validates_inputs() {
        let p = pertussis(0.01, 5.0, 1.0);
        assert!(hopf_scan(ModelKind::Sirws, &p, ScanParam::Nu, (0.5, 200.0), 8).is_err());
        assert!(hopf_scan(ModelKind::Sirws, &p, ScanParam::Nu, (2.0, 1.0), 32).is_err());
    }

    #[test]
    fn sir_always_classifies_as_point() {
        let p = ModelParams::sir(2.0, 1.0, 1.0, 1e-2);
        let ics = vec![SystemState::planar(0.6, 0.2), SystemState::planar(0.35, 0.05)];
        let label = attractor_classify(ModelKind::Sir, &p, &ics, 60.0, 0.5).unwrap();
        assert_eq!(label.tag, AttractorTag::Point);
        for e in &label.evidence {
            assert!(e.amplitude < AMP_TOL);
        }
    }

    #[test]
    fn classification_needs_two_probes() {
        let p = sir2();
        let ics = vec![SystemState::planar(0.6, 0.2)];
        assert!(attractor_classify(ModelKind::Sir, &p, &ics, 10.0, 0.5).is_err());
    }

    #[test]
    fn lyapunov_zero_at_equilibrium_positive_nearby() {
        let p = sir2();
        let eq = endemic_equilibrium(ModelKind::Sir, &p).unwrap();
        let at_eq = lyapunov_l1(&p, eq.s, eq.i).unwrap();
        assert!(at_eq.abs() < 1e-15);
        assert!(lyapunov_l1(&p, eq.s * 1.1, eq.i).unwrap() > 0.0);
        assert!(lyapunov_l1(&p, -0.1, 0.5).is_err());
    }

    #[test]
    fn lyapunov_decreases_along_an_orbit() {
        let p = sir2();
        let cfg = IntegratorConfig {
            horizon: 50.0,
            rel_tol: 1e-10,
            abs_tol: 1e-12,
            ..IntegratorConfig::default()
        };
        let traj = integrate(
            ModelKind::Sir,
            &p,
            SystemState::planar(0.55, 0.1),
            TimeFrame::Slow,
            &cfg,
            &[],
        )
        .unwrap();
        let mut prev = f64::INFINITY;
        for x in &traj.states {
            let l = lyapunov_l1(&p, x.s, x.i).unwrap();
            assert!(l <= prev + 1e-8, "L1 increment {:.3e}", l - prev);
            prev = l;
        }
    }
}
