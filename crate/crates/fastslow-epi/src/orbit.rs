//! Adaptive integration of the three models with event detection, an
//! automatic logarithmic chart for exponentially small I, Poincare returns,
//! the monotone excursion-peak sequences, and singular-orbit concatenation.
//!
//! The stepper is an embedded Dormand-Prince 5(4) pair with PI step-size
//! control. No implicit solves are needed: the only stiffness in these
//! systems is the exponential pinning of I to the critical manifold, which
//! the v = ln I chart removes. Everything here is deterministic; identical
//! inputs produce bit-identical trajectories on one platform.

use crate::error::{Error, Result};
use crate::maps::{gamma_invariant, gamma_level_i, pi1_map, GammaLevel};
use crate::model::{
    layer_field_raw, log_field_raw, log_layer_field_raw, slow_field_raw, vector_field_raw,
    ModelKind, ModelParams, SystemState, TimeFrame,
};
use crate::entry_exit::sir_exit_point;
use serde::{Deserialize, Serialize};

/// Integration controls. `log_switch_threshold` of `None` selects the
/// default: epsilon^2 for the full system, 1e-8 for the layer system.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_step: f64,
    pub horizon: f64,
    pub log_switch_threshold: Option<f64>,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            max_step: f64::INFINITY,
            horizon: 1e3,
            log_switch_threshold: None,
        }
    }
}

impl IntegratorConfig {
    pub fn with_horizon(horizon: f64) -> Self {
        Self { horizon, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.abs_tol > 0.0) {
            return Err(Error::InvalidParams("tolerances must be positive".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::InvalidParams("horizon must be positive".into()));
        }
        if !(self.max_step > 0.0) {
            return Err(Error::InvalidParams("max_step must be positive".into()));
        }
        if let Some(t) = self.log_switch_threshold {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::InvalidParams(
                    "log_switch_threshold must lie in (0, 1)".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Crossing orientation for section events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrossingDirection {
    Up,
    Down,
    Any,
}

/// What to watch along a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum EventKind {
    ICrossing { level: f64 },
    SCrossing { level: f64 },
    /// Zero of the S-component of the flow (the S-nullcline surface).
    NullclineCrossing,
    /// Leaving the tube I < width around the critical manifold.
    TubeExit { width: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    pub kind: EventKind,
    pub direction: CrossingDirection,
    pub terminal: bool,
}

impl EventSpec {
    pub fn i_crossing(level: f64, direction: CrossingDirection) -> Self {
        Self { kind: EventKind::ICrossing { level }, direction, terminal: false }
    }

    pub fn s_crossing(level: f64, direction: CrossingDirection) -> Self {
        Self { kind: EventKind::SCrossing { level }, direction, terminal: false }
    }

    pub fn nullcline(direction: CrossingDirection) -> Self {
        Self { kind: EventKind::NullclineCrossing, direction, terminal: false }
    }

    pub fn tube_exit(width: f64) -> Self {
        Self { kind: EventKind::TubeExit { width }, direction: CrossingDirection::Up, terminal: false }
    }

    pub fn terminal(mut self) -> Self {
        self.terminal = true;
        self
    }

    fn validate(&self) -> Result<()> {
        let level = match self.kind {
            EventKind::ICrossing { level } | EventKind::SCrossing { level } => level,
            EventKind::TubeExit { width } => width,
            EventKind::NullclineCrossing => return Ok(()),
        };
        if !(level.is_finite() && (0.0..=1.0).contains(&level)) {
            return Err(Error::InvalidParams(format!(
                "event level {level} must lie within the state bounds [0, 1]"
            )));
        }
        Ok(())
    }
}

/// A located event: refined crossing time, state there, and the spec that
/// fired (with its index in the request list).
#[derive(Debug, Clone, Copy)]
pub struct EventRecord {
    pub time: f64,
    pub state: SystemState,
    pub spec: EventSpec,
    pub spec_index: usize,
}

/// Time-stamped state sequence with event annotations.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<SystemState>,
    pub events: Vec<EventRecord>,
}

impl Trajectory {
    pub fn last_state(&self) -> Option<SystemState> {
        self.states.last().copied()
    }

    pub fn last_time(&self) -> Option<f64> {
        self.times.last().copied()
    }

    /// Events of one spec index, in time order.
    pub fn events_for(&self, spec_index: usize) -> impl Iterator<Item = &EventRecord> {
        self.events.iter().filter(move |e| e.spec_index == spec_index)
    }
}

/// Which right-hand side the stepper advances.
#[derive(Debug, Clone, Copy)]
enum FlowSystem {
    Full(TimeFrame),
    Layer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Chart {
    Linear,
    Log,
}

// Dormand-Prince 5(4) tableau.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// b - b*: error weights of the embedded fourth-order solution.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const PI_ALPHA: f64 = 0.17;
const PI_BETA: f64 = 0.04;
const LOG_EXIT_FACTOR: f64 = 2.0;
const MAX_STEPS: usize = 50_000_000;

struct Stepper<'a> {
    kind: ModelKind,
    p: &'a ModelParams,
    system: FlowSystem,
    chart: Chart,
    log_threshold: f64,
    rel_tol: f64,
    abs_tol: f64,
}

impl<'a> Stepper<'a> {
    #[inline]
    fn rhs(&self, y: &[f64; 3]) -> [f64; 3] {
        match (self.system, self.chart) {
            (FlowSystem::Full(frame), Chart::Linear) => {
                vector_field_raw(self.kind, frame, self.p, y[0], y[1], y[2])
            }
            (FlowSystem::Full(frame), Chart::Log) => {
                log_field_raw(self.kind, frame, self.p, y[0], y[1], y[2])
            }
            (FlowSystem::Layer, Chart::Linear) => {
                layer_field_raw(self.kind, self.p, y[0], y[1], y[2])
            }
            (FlowSystem::Layer, Chart::Log) => {
                log_layer_field_raw(self.kind, self.p, y[0], y[1], y[2])
            }
        }
    }

    /// One embedded step from `y` with derivative `k1` already evaluated.
    /// Returns the fifth-order solution, its FSAL derivative, and the
    /// weighted RMS error estimate.
    fn step(&self, y: &[f64; 3], k1: &[f64; 3], h: f64) -> ([f64; 3], [f64; 3], f64) {
        let dim = self.kind.dim();
        let lin = |coeffs: &[(f64, &[f64; 3])]| -> [f64; 3] {
            let mut out = *y;
            for c in 0..3 {
                let mut acc = 0.0;
                for (w, k) in coeffs {
                    acc += w * k[c];
                }
                out[c] = y[c] + h * acc;
            }
            out
        };
        let k2 = self.rhs(&lin(&[(A21, k1)]));
        let k3 = self.rhs(&lin(&[(A31, k1), (A32, &k2)]));
        let k4 = self.rhs(&lin(&[(A41, k1), (A42, &k2), (A43, &k3)]));
        let k5 = self.rhs(&lin(&[(A51, k1), (A52, &k2), (A53, &k3), (A54, &k4)]));
        let k6 = self.rhs(&lin(&[(A61, k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]));
        let y5 = lin(&[(B1, k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)]);
        let k7 = self.rhs(&y5);
        let mut err_sq = 0.0;
        for c in 0..dim {
            let e = h
                * (E1 * k1[c] + E3 * k3[c] + E4 * k4[c] + E5 * k5[c] + E6 * k6[c] + E7 * k7[c]);
            let scale = self.abs_tol + self.rel_tol * y[c].abs().max(y5[c].abs());
            let r = e / scale;
            err_sq += r * r;
        }
        (y5, k7, (err_sq / dim as f64).sqrt())
    }

    fn view(&self, y: &[f64; 3]) -> SystemState {
        match self.chart {
            Chart::Linear => SystemState { s: y[0], i: y[1], w: y[2] },
            Chart::Log => SystemState { s: y[0], i: y[1].exp(), w: y[2] },
        }
    }

    /// Event residual; evaluated so that its sign is chart-independent.
    fn event_value(&self, spec: &EventSpec, y: &[f64; 3]) -> f64 {
        match spec.kind {
            EventKind::ICrossing { level } | EventKind::TubeExit { width: level } => {
                match self.chart {
                    Chart::Linear => y[1] - level,
                    Chart::Log => y[1] - level.ln(),
                }
            }
            EventKind::SCrossing { level } => y[0] - level,
            EventKind::NullclineCrossing => {
                let x = self.view(y);
                match self.system {
                    FlowSystem::Full(_) => {
                        slow_field_raw(self.kind, self.p, x.s, x.i, x.w)[0]
                    }
                    FlowSystem::Layer => layer_field_raw(self.kind, self.p, x.s, x.i, x.w)[0],
                }
            }
        }
    }

    /// Switch representation after an accepted step if I crossed the
    /// chart threshold; returns true when the chart changed.
    fn maybe_switch(&mut self, y: &mut [f64; 3]) -> Result<bool> {
        match self.chart {
            Chart::Linear => {
                if y[1] < self.log_threshold {
                    if y[1] <= 0.0 {
                        return Err(Error::Convergence(format!(
                            "I = {} left the positive cone before the log chart engaged",
                            y[1]
                        )));
                    }
                    y[1] = y[1].ln();
                    self.chart = Chart::Log;
                    return Ok(true);
                }
            }
            Chart::Log => {
                if y[1] > (self.log_threshold * LOG_EXIT_FACTOR).ln() {
                    y[1] = y[1].exp();
                    self.chart = Chart::Linear;
                    return Ok(true);
                }
            }
        }
        Ok(false)
    }
}

fn crossing_matches(g0: f64, g1: f64, dir: CrossingDirection) -> bool {
    match dir {
        CrossingDirection::Up => g0 < 0.0 && g1 > 0.0,
        CrossingDirection::Down => g0 > 0.0 && g1 < 0.0,
        CrossingDirection::Any => g0 * g1 < 0.0,
    }
}

fn integrate_inner(
    kind: ModelKind,
    p: &ModelParams,
    x0: SystemState,
    system: FlowSystem,
    cfg: &IntegratorConfig,
    events: &[EventSpec],
) -> Result<Trajectory> {
    p.validate(kind)?;
    x0.validate(kind)?;
    cfg.validate()?;
    for spec in events {
        spec.validate()?;
    }
    let log_threshold = cfg.log_switch_threshold.unwrap_or(match system {
        FlowSystem::Full(_) => (p.epsilon * p.epsilon).min(1e-4),
        FlowSystem::Layer => 1e-8,
    });

    let mut stepper = Stepper {
        kind,
        p,
        system,
        chart: Chart::Linear,
        log_threshold,
        rel_tol: cfg.rel_tol,
        abs_tol: cfg.abs_tol,
    };
    let mut y = x0.to_array();
    if y[1] > 0.0 && y[1] < log_threshold {
        y[1] = y[1].ln();
        stepper.chart = Chart::Log;
    }

    let mut traj = Trajectory::default();
    traj.times.push(0.0);
    traj.states.push(x0);

    let mut t = 0.0f64;
    let mut k1 = stepper.rhs(&y);
    let mut h = initial_step(&stepper, &y, &k1, cfg);
    let mut err_prev: f64 = 1.0;
    let mut just_rejected = false;

    for _ in 0..MAX_STEPS {
        if t >= cfg.horizon {
            return Ok(traj);
        }
        h = h.min(cfg.max_step).min(cfg.horizon - t);
        if h < 4.0 * f64::EPSILON * t.abs().max(f64::MIN_POSITIVE) {
            return Err(Error::Stiffness { t, h });
        }
        let (y_new, k_new, err) = stepper.step(&y, &k1, h);
        if !err.is_finite() {
            // poisoned arithmetic; retry with a smaller step
            h *= 0.25;
            just_rejected = true;
            continue;
        }
        if err > 1.0 {
            let fac = (SAFETY * err.powf(-PI_ALPHA)).max(FAC_MIN);
            h *= fac.min(1.0);
            just_rejected = true;
            continue;
        }

        // locate events inside [t, t+h]
        let t1 = t + h;
        let mut fired: Vec<EventRecord> = Vec::new();
        let mut terminal_at: Option<f64> = None;
        for (idx, spec) in events.iter().enumerate() {
            let g0 = stepper.event_value(spec, &y);
            let g1 = stepper.event_value(spec, &y_new);
            let (te, ye) = if g0 != 0.0 && g1 == 0.0 && crossing_matches(g0, -g0, spec.direction)
            {
                (t1, y_new)
            } else if g0 != 0.0 && crossing_matches(g0, g1, spec.direction) {
                refine_event(&stepper, spec, t, &y, &k1, h, g0, g1)?
            } else {
                continue;
            };
            fired.push(EventRecord {
                time: te,
                state: stepper.view(&ye),
                spec: *spec,
                spec_index: idx,
            });
            if spec.terminal {
                terminal_at = Some(terminal_at.map_or(te, |cur: f64| cur.min(te)));
            }
        }
        fired.sort_by(|a, b| a.time.total_cmp(&b.time));
        if let Some(t_stop) = terminal_at {
            let mut final_state = None;
            for ev in fired {
                if ev.time <= t_stop {
                    if ev.spec.terminal && final_state.is_none() {
                        final_state = Some(ev.state);
                    }
                    traj.events.push(ev);
                }
            }
            let xf = final_state.expect("a terminal event fired in this step");
            traj.times.push(t_stop);
            traj.states.push(xf);
            return Ok(traj);
        }
        traj.events.extend(fired);

        t = t1;
        y = y_new;
        k1 = k_new;
        traj.times.push(t);
        traj.states.push(stepper.view(&y));

        if stepper.maybe_switch(&mut y)? {
            k1 = stepper.rhs(&y);
        }

        // PI controller
        let err_clamped = err.max(1e-10);
        let mut fac = SAFETY * err_clamped.powf(-PI_ALPHA) * err_prev.powf(PI_BETA);
        let cap = if just_rejected { 1.0 } else { FAC_MAX };
        fac = fac.clamp(FAC_MIN, cap);
        h *= fac;
        err_prev = err_clamped;
        just_rejected = false;
    }
    Err(Error::Convergence(format!(
        "step budget exhausted at t = {t} (horizon {})",
        cfg.horizon
    )))
}

fn initial_step(
    stepper: &Stepper,
    y: &[f64; 3],
    k1: &[f64; 3],
    cfg: &IntegratorConfig,
) -> f64 {
    let dim = stepper.kind.dim();
    let mut d0sq = 0.0;
    let mut d1sq = 0.0;
    for c in 0..dim {
        let scale = stepper.abs_tol + stepper.rel_tol * y[c].abs();
        let a = y[c] / scale;
        let b = k1[c] / scale;
        d0sq += a * a;
        d1sq += b * b;
    }
    let d0 = (d0sq / dim as f64).sqrt();
    let d1 = (d1sq / dim as f64).sqrt();
    let guess = if d1 > 0.0 { 0.01 * d0 / d1 } else { cfg.horizon };
    guess.min(cfg.max_step).min(cfg.horizon)
}

/// Locate the crossing inside one accepted step by re-stepping from the
/// step start; converges to a relative time width near machine precision.
#[allow(clippy::too_many_arguments)]
fn refine_event(
    stepper: &Stepper,
    spec: &EventSpec,
    t0: f64,
    y0: &[f64; 3],
    k1: &[f64; 3],
    h: f64,
    g0: f64,
    g1: f64,
) -> Result<(f64, [f64; 3])> {
    let state_at = |t: f64| -> [f64; 3] {
        if t <= t0 {
            return *y0;
        }
        let dt = t - t0;
        if dt >= h {
            return stepper.step(y0, k1, h).0;
        }
        stepper.step(y0, k1, dt).0
    };
    let g = |t: f64| stepper.event_value(spec, &state_at(t));

    let (mut a, mut b) = (t0, t0 + h);
    let (mut ga, mut gb) = (g0, g1);
    let tol = 16.0 * f64::EPSILON * b.abs().max(f64::MIN_POSITIVE);
    for _ in 0..120 {
        if (b - a).abs() <= tol {
            break;
        }
        // secant proposal, bisection fallback
        let mut m = b - gb * (b - a) / (gb - ga);
        if !m.is_finite() || m <= a || m >= b {
            m = 0.5 * (a + b);
        }
        if m == a || m == b {
            break;
        }
        let gm = g(m);
        if gm == 0.0 {
            return Ok((m, state_at(m)));
        }
        if (gm > 0.0) == (gb > 0.0) {
            b = m;
            gb = gm;
        } else {
            a = m;
            ga = gm;
        }
    }
    let te = b;
    Ok((te, state_at(te)))
}

/// Integrate the full fast-slow system in the requested frame.
pub fn integrate(
    kind: ModelKind,
    p: &ModelParams,
    x0: SystemState,
    frame: TimeFrame,
    cfg: &IntegratorConfig,
    events: &[EventSpec],
) -> Result<Trajectory> {
    integrate_inner(kind, p, x0, FlowSystem::Full(frame), cfg, events)
}

/// Integrate the layer (epsilon = 0 fast) system; time is fast time.
pub fn integrate_layer(
    kind: ModelKind,
    p: &ModelParams,
    x0: SystemState,
    cfg: &IntegratorConfig,
    events: &[EventSpec],
) -> Result<Trajectory> {
    integrate_inner(kind, p, x0, FlowSystem::Layer, cfg, events)
}

/// First transversal return to the section in its specified direction.
/// Returns `None` when no crossing happens before the horizon.
pub fn poincare_return(
    kind: ModelKind,
    p: &ModelParams,
    section: &EventSpec,
    x0: SystemState,
    frame: TimeFrame,
    cfg: &IntegratorConfig,
) -> Result<Option<(SystemState, f64)>> {
    let spec = section.terminal();
    let traj = integrate(kind, p, x0, frame, cfg, &[spec])?;
    Ok(traj.events.last().map(|e| (e.state, e.time)))
}

/// Excursion-peak sequences: S_{k+1} is the exit point of the landing point
/// P_k of S_k. Both returned vectors have n+1 entries, with P_k the landing
/// point of S_k. {S_k} decreases toward 1/r0 and {P_k} increases toward it.
pub fn peak_sequences(p: &ModelParams, s0: f64, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    p.require_endemic()?;
    let turn = 1.0 / p.r0();
    if !(s0 > turn && s0 < 1.0) {
        return Err(Error::Domain(format!(
            "peak sequences need s0 in (1/r0, 1) = ({turn}, 1), got {s0}"
        )));
    }
    if n < 1 {
        return Err(Error::InvalidParams("need at least one iteration".into()));
    }
    let mut s_seq = Vec::with_capacity(n + 1);
    let mut p_seq = Vec::with_capacity(n + 1);
    let mut s = s0;
    s_seq.push(s);
    for _ in 0..n {
        let landing = pi1_map(p, s, 0.0)?;
        p_seq.push(landing);
        s = sir_exit_point(p, landing)?;
        s_seq.push(s);
    }
    p_seq.push(pi1_map(p, s, 0.0)?);
    Ok((s_seq, p_seq))
}

/// One piece of a singular orbit: a fast heteroclinic riding a Gamma level,
/// or a slow drift along the S-axis with its closed-form duration.
#[derive(Debug, Clone, Copy)]
pub enum OrbitSegment {
    Fast { s_start: f64, s_end: f64, level: GammaLevel },
    Slow { s_start: f64, s_end: f64, duration: f64 },
}

/// Alternating fast/slow concatenation approached by the true orbit as
/// epsilon tends to zero.
#[derive(Debug, Clone)]
pub struct SingularOrbit {
    pub segments: Vec<OrbitSegment>,
}

impl SingularOrbit {
    /// Sample the orbit as (S, I) points, `n` per segment, for plotting or
    /// distance measurements.
    pub fn sample(&self, p: &ModelParams, n: usize) -> Vec<(f64, f64)> {
        let mut pts = Vec::with_capacity(self.segments.len() * n);
        for seg in &self.segments {
            match *seg {
                OrbitSegment::Fast { s_start, s_end, level } => {
                    for k in 0..n {
                        let s = s_start + (s_end - s_start) * (k as f64) / ((n - 1) as f64);
                        let i = gamma_level_i(p, level, s).unwrap_or(0.0).max(0.0);
                        pts.push((s, i));
                    }
                }
                OrbitSegment::Slow { s_start, s_end, .. } => {
                    for k in 0..n {
                        let s = s_start + (s_end - s_start) * (k as f64) / ((n - 1) as f64);
                        pts.push((s, 0.0));
                    }
                }
            }
        }
        pts
    }
}

/// Build the singular orbit from `s0` with `n_loops` slow returns. Each loop
/// is one fast heteroclinic from (S_k, 0) to (P_k, 0) followed by the slow
/// drift to the exit point S_{k+1}; the slow duration solves dS = xi (1-S)
/// in closed form.
pub fn singular_orbit(p: &ModelParams, s0: f64, n_loops: usize) -> Result<SingularOrbit> {
    p.require_endemic()?;
    if n_loops >= 1 && !(p.xi > 0.0) {
        return Err(Error::Domain(
            "slow segments need xi > 0 for the drift toward S = 1".into(),
        ));
    }
    let mut segments = Vec::with_capacity(2 * n_loops + 1);
    let mut s = s0;
    for loop_idx in 0..=n_loops {
        let landing = pi1_map(p, s, 0.0)?;
        segments.push(OrbitSegment::Fast {
            s_start: s,
            s_end: landing,
            level: gamma_invariant(p, s, 0.0)?,
        });
        if loop_idx == n_loops {
            break;
        }
        let s_next = sir_exit_point(p, landing)?;
        segments.push(OrbitSegment::Slow {
            s_start: landing,
            s_end: s_next,
            duration: ((1.0 - landing) / (1.0 - s_next)).ln() / p.xi,
        });
        s = s_next;
    }
    Ok(SingularOrbit { segments })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sir2(eps: f64) -> ModelParams {
        ModelParams::sir(2.0, 1.0, 1.0, eps)
    }

    #[test]
    fn equilibrium_initial_condition_stays_put() {
        let p = sir2(1e-3);
        let cfg = IntegratorConfig::with_horizon(10.0);
        let traj = integrate(
            ModelKind::Sir,
            &p,
            SystemState::planar(1.0, 0.0),
            TimeFrame::Fast,
            &cfg,
            &[],
        )
        .unwrap();
        for x in &traj.states {
            assert_eq!((x.s, x.i), (1.0, 0.0));
        }
        assert_eq!(traj.last_time().unwrap(), 10.0);
    }

    #[test]
    fn frames_scale_times_exactly_for_power_of_two_epsilon() {
        // epsilon = 2^-10 makes the fast field an exact scaling of the slow
        // one, so the two integrations perform identical arithmetic
        let eps = (2.0f64).powi(-10);
        let p = sir2(eps);
        let x0 = SystemState::planar(0.9, 1e-4);
        let ev = EventSpec::i_crossing(1e-2, CrossingDirection::Up);
        let fast_cfg = IntegratorConfig {
            horizon: 64.0,
            max_step: 8.0,
            ..IntegratorConfig::default()
        };
        let slow_cfg = IntegratorConfig {
            horizon: 64.0 * eps,
            max_step: 8.0 * eps,
            ..IntegratorConfig::default()
        };
        let tf = integrate(ModelKind::Sir, &p, x0, TimeFrame::Fast, &fast_cfg, &[ev]).unwrap();
        let ts = integrate(ModelKind::Sir, &p, x0, TimeFrame::Slow, &slow_cfg, &[ev]).unwrap();
        assert_eq!(tf.times.len(), ts.times.len());
        for (a, b) in tf.times.iter().zip(&ts.times) {
            assert_eq!(*a * eps, *b);
        }
        assert_eq!(tf.events.len(), ts.events.len());
        assert!(!tf.events.is_empty());
        for (a, b) in tf.events.iter().zip(&ts.events) {
            assert_eq!(a.time * eps, b.time);
            assert_eq!(a.state, b.state);
        }
    }

    #[test]
    fn gamma_drift_small_until_the_excursion_peak() {
        // the invariant drifts O(epsilon) along the fast excursion; measured
        // against the I-peak section S = (gamma + eps xi)/beta
        let p = sir2(1e-3);
        let x0 = SystemState::planar(0.9, 1e-6);
        let peak_s = (p.gamma + p.epsilon * p.xi) / p.beta;
        let ev = EventSpec::s_crossing(peak_s, CrossingDirection::Down).terminal();
        let cfg = IntegratorConfig {
            horizon: 100.0,
            rel_tol: 1e-10,
            abs_tol: 1e-12,
            ..IntegratorConfig::default()
        };
        let traj = integrate(ModelKind::Sir, &p, x0, TimeFrame::Fast, &cfg, &[ev]).unwrap();
        let hit = traj.events.last().expect("peak section not reached");
        let g0 = gamma_invariant(&p, x0.s, x0.i).unwrap().0;
        let g1 = gamma_invariant(&p, hit.state.s, hit.state.i).unwrap().0;
        assert!((g1 - g0).abs() < 2e-3, "drift {:.3e}", (g1 - g0).abs());
    }

    #[test]
    fn event_localization_is_tight() {
        let p = ModelParams::sir(260.0, 17.0, 0.0, 1.0);
        let ev = EventSpec::i_crossing(0.05, CrossingDirection::Up);
        let cfg = IntegratorConfig::with_horizon(2.0);
        let traj = integrate_layer(
            ModelKind::Sir,
            &p,
            SystemState::planar(0.9, 1e-4),
            &cfg,
            &[ev],
        )
        .unwrap();
        let hit = traj.events_for(0).next().expect("no crossing found");
        assert!((hit.state.i - 0.05).abs() < 1e-8, "residual {:.3e}", hit.state.i - 0.05);
    }

    #[test]
    fn tolerance_tightening_reduces_error() {
        let p = sir2(1e-2);
        let x0 = SystemState::planar(0.9, 1e-4);
        let run = |rtol: f64| -> SystemState {
            let cfg = IntegratorConfig {
                horizon: 30.0,
                rel_tol: rtol,
                abs_tol: rtol * 1e-2,
                ..IntegratorConfig::default()
            };
            integrate(ModelKind::Sir, &p, x0, TimeFrame::Fast, &cfg, &[])
                .unwrap()
                .last_state()
                .unwrap()
        };
        let reference = run(1e-12);
        let mut prev_err = f64::INFINITY;
        let mut errs = Vec::new();
        for rtol in [1e-5, 1e-6, 1e-7, 1e-8, 1e-9] {
            let x = run(rtol);
            let err = (x.s - reference.s).abs().max((x.i - reference.i).abs());
            assert!(err < prev_err * 1.5, "error did not shrink at rtol {rtol}: {err:.3e}");
            errs.push(err);
            prev_err = err;
        }
        assert!(
            errs[0] / errs[errs.len() - 1].max(1e-300) > 1e2,
            "tolerance sweep too flat: {errs:?}"
        );
    }

    #[test]
    fn log_chart_switching_preserves_the_path() {
        // same dynamics integrated with an early and a late chart switch
        let p = sir2(1e-2);
        let x0 = SystemState::planar(0.3, 1e-4);
        let run = |thr: f64| -> SystemState {
            let cfg = IntegratorConfig {
                horizon: 20.0,
                rel_tol: 1e-10,
                abs_tol: 1e-14,
                log_switch_threshold: Some(thr),
                ..IntegratorConfig::default()
            };
            integrate(ModelKind::Sir, &p, x0, TimeFrame::Fast, &cfg, &[])
                .unwrap()
                .last_state()
                .unwrap()
        };
        let a = run(1e-6);
        let b = run(1e-12);
        assert_relative_eq!(a.s, b.s, max_relative = 1e-9);
        assert!((a.i - b.i).abs() < 1e-12);
    }

    #[test]
    fn deep_dips_stay_on_the_simplex() {
        let p = sir2(1e-3);
        let cfg = IntegratorConfig::with_horizon(2000.0);
        let traj = integrate(
            ModelKind::Sir,
            &p,
            SystemState::planar(0.9, 1e-6),
            TimeFrame::Fast,
            &cfg,
            &[],
        )
        .unwrap();
        for (t, x) in traj.times.iter().zip(&traj.states) {
            assert!(x.s >= -1e-8 && x.i >= -1e-8, "negative state at t = {t}");
            assert!(x.s + x.i <= 1.0 + 1e-8, "simplex violation at t = {t}");
        }
        for w in traj.times.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn poincare_spirals_into_the_endemic_point() {
        let p = sir2(1e-2);
        let eq = crate::model::endemic_equilibrium(ModelKind::Sir, &p).unwrap();
        let x0 = SystemState::planar(eq.s, eq.i * 3.0);
        let section = EventSpec::s_crossing(eq.s, CrossingDirection::Up);
        let cfg = IntegratorConfig::with_horizon(5e3);
        let (ret, t) = poincare_return(ModelKind::Sir, &p, &section, x0, TimeFrame::Fast, &cfg)
            .unwrap()
            .expect("no return");
        assert!(t > 0.0);
        assert!((ret.i - eq.i).abs() < (x0.i - eq.i).abs(), "no contraction toward I_E");
    }

    #[test]
    fn poincare_reports_no_return_before_horizon() {
        let p = sir2(1e-2);
        let section = EventSpec::s_crossing(0.95, CrossingDirection::Up);
        let cfg = IntegratorConfig::with_horizon(1.0);
        let out = poincare_return(
            ModelKind::Sir,
            &p,
            &section,
            SystemState::planar(0.5, 0.2),
            TimeFrame::Fast,
            &cfg,
        )
        .unwrap();
        assert!(out.is_none());
    }

    #[test]
    fn peak_sequences_frozen_and_monotone() {
        let p = sir2(1e-3);
        let (s_seq, p_seq) = peak_sequences(&p, 0.9, 50).unwrap();
        assert_eq!(s_seq.len(), 51);
        assert_eq!(p_seq.len(), 51);
        for k in 0..50 {
            assert!(s_seq[k + 1] < s_seq[k], "S not strictly decreasing at {k}");
            assert!(p_seq[k + 1] > p_seq[k], "P not strictly increasing at {k}");
            assert!(p_seq[k] < 0.5 && s_seq[k] > 0.5, "interleaving failed at {k}");
        }
        // frozen fiftieth iterates (independent high-precision bisection)
        assert_relative_eq!(s_seq[50], 0.50735819283311515, max_relative = 1e-10);
        assert_relative_eq!(p_seq[49], 0.492568900507472131, max_relative = 1e-10);
        assert_relative_eq!(p_seq[50], 0.492713297134719033, max_relative = 1e-10);
    }

    #[test]
    fn peak_sequences_fixed_point_start() {
        let p = sir2(1e-3);
        let (s_seq, p_seq) = peak_sequences(&p, 0.5 + 1e-9, 5).unwrap();
        for (s, pp) in s_seq.iter().zip(&p_seq) {
            assert!((s - 0.5).abs() < 1e-6);
            assert!((pp - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn singular_orbit_shapes() {
        let p = sir2(1e-3);
        let orbit = singular_orbit(&p, 0.9, 0).unwrap();
        assert_eq!(orbit.segments.len(), 1);
        match orbit.segments[0] {
            OrbitSegment::Fast { s_start, s_end, .. } => {
                assert_eq!(s_start, 0.9);
                assert_relative_eq!(s_end, 0.240813030026910288, max_relative = 1e-12);
            }
            _ => panic!("expected a fast segment"),
        }

        let orbit = singular_orbit(&p, 0.9, 2).unwrap();
        assert_eq!(orbit.segments.len(), 5);
        match orbit.segments[1] {
            OrbitSegment::Slow { s_start, s_end, duration } => {
                let expect = ((1.0 - s_start) / (1.0 - s_end)).ln() / p.xi;
                assert_eq!(duration, expect);
                assert_relative_eq!(duration, 0.902735625258599741, max_relative = 1e-10);
            }
            _ => panic!("expected a slow segment"),
        }
    }

    #[test]
    fn true_orbit_shadows_the_singular_one() {
        // two loops at eps = 1e-3 stay within 0.02 of the concatenation
        let p = sir2(1e-3);
        let orbit = singular_orbit(&p, 0.9, 2).unwrap();
        let sing = orbit.sample(&p, 2000);
        let ev = EventSpec::i_crossing(1e-6, CrossingDirection::Up);
        let cfg = IntegratorConfig::with_horizon(3000.0);
        let traj = integrate(
            ModelKind::Sir,
            &p,
            SystemState::planar(0.9, 1e-6),
            TimeFrame::Fast,
            &cfg,
            &[ev],
        )
        .unwrap();
        let t_end = traj
            .events_for(0)
            .filter(|e| e.time > 1.0)
            .nth(1)
            .map(|e| e.time)
            .unwrap_or(cfg.horizon);
        let mut worst = 0.0f64;
        for (t, x) in traj.times.iter().zip(&traj.states) {
            if *t > t_end {
                break;
            }
            let mut best = f64::INFINITY;
            for (s, i) in &sing {
                let d = (x.s - s).hypot(x.i - i);
                if d < best {
                    best = d;
                }
            }
            worst = worst.max(best);
        }
        assert!(worst < 0.02, "Hausdorff excess: {worst:.4}");
    }

    #[test]
    fn horizon_without_event_is_reported_not_an_error() {
        let p = sir2(1e-3);
        let ev = EventSpec::i_crossing(0.9, CrossingDirection::Up);
        let cfg = IntegratorConfig::with_horizon(1.0);
        let traj = integrate(
            ModelKind::Sir,
            &p,
            SystemState::planar(0.6, 1e-4),
            TimeFrame::Fast,
            &cfg,
            &[ev],
        )
        .unwrap();
        assert!(traj.events.is_empty());
        assert_relative_eq!(traj.last_time().unwrap(), 1.0, max_relative = 1e-12);
    }
}
