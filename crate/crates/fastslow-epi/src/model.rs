//! Model definitions: parameter records, state types, vector fields in both
//! time frames, layer/reduced subsystems, the log-rescaled chart, analytic
//! Jacobians, and closed-form/Newton endemic equilibria.
//!
//! All three models share one parameter record; fields irrelevant to a model
//! must be zero and are checked per kind. The slow-frame field is the
//! primitive expression; the fast-frame field is the slow one scaled by
//! epsilon componentwise, so the two frames agree exactly in floating point.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which compartment model is being run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Sir,
    Sirs,
    Sirws,
}

impl ModelKind {
    /// State dimension after eliminating R: 2 for SIR/SIRS, 3 for SIRWS.
    pub fn dim(self) -> usize {
        match self {
            ModelKind::Sir | ModelKind::Sirs => 2,
            ModelKind::Sirws => 3,
        }
    }

    pub fn has_w(self) -> bool {
        matches!(self, ModelKind::Sirws)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Sir => "sir",
            ModelKind::Sirs => "sirs",
            ModelKind::Sirws => "sirws",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sir" => Ok(ModelKind::Sir),
            "sirs" => Ok(ModelKind::Sirs),
            "sirws" => Ok(ModelKind::Sirws),
            other => Err(Error::Config(format!("unknown model kind `{other}`"))),
        }
    }
}

/// Time frame selector. Fast time t and slow time tau are related by
/// t = tau / epsilon; derivatives in the fast frame equal epsilon times
/// the slow-frame derivatives, componentwise and exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeFrame {
    Fast,
    Slow,
}

impl std::str::FromStr for TimeFrame {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fast" | "t" => Ok(TimeFrame::Fast),
            "slow" | "tau" => Ok(TimeFrame::Slow),
            other => Err(Error::Config(format!("unknown time frame `{other}`"))),
        }
    }
}

/// Rate constants shared by the three models plus the time-scale ratio.
///
/// `beta` and `gamma` are the O(1/epsilon) infection and recovery rates in
/// slow time (the record stores their O(1) prefactors). `xi` is birth/death,
/// `kappa` half the immunity-waning rate, `nu` the boosting ratio, `delta`
/// the SIRS immunity-loss rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub beta: f64,
    pub gamma: f64,
    #[serde(default)]
    pub xi: f64,
    #[serde(default)]
    pub kappa: f64,
    #[serde(default)]
    pub nu: f64,
    #[serde(default)]
    pub delta: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    1.0
}

impl ModelParams {
    /// SIR parameters; waning/boosting/immunity-loss fields are zero.
    pub fn sir(beta: f64, gamma: f64, xi: f64, epsilon: f64) -> Self {
        Self { beta, gamma, xi, kappa: 0.0, nu: 0.0, delta: 0.0, epsilon }
    }

    /// SIRS parameters; no birth/death, immunity loss at rate `delta`.
    pub fn sirs(beta: f64, gamma: f64, delta: f64, epsilon: f64) -> Self {
        Self { beta, gamma, xi: 0.0, kappa: 0.0, nu: 0.0, delta, epsilon }
    }

    /// SIRWS parameters (two-stage waning immunity with boosting).
    pub fn sirws(beta: f64, gamma: f64, xi: f64, kappa: f64, nu: f64, epsilon: f64) -> Self {
        Self { beta, gamma, xi, kappa, nu, delta: 0.0, epsilon }
    }

    /// Basic reproduction number beta/gamma.
    pub fn r0(&self) -> f64 {
        self.beta / self.gamma
    }

    /// Check positivity/zero constraints for the given kind.
    pub fn validate(&self, kind: ModelKind) -> Result<()> {
        let fin = |v: f64, name: &str| -> Result<()> {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidParams(format!("{name} must be finite, got {v}")))
            }
        };
        for (v, name) in [
            (self.beta, "beta"),
            (self.gamma, "gamma"),
            (self.xi, "xi"),
            (self.kappa, "kappa"),
            (self.nu, "nu"),
            (self.delta, "delta"),
            (self.epsilon, "epsilon"),
        ] {
            fin(v, name)?;
        }
        if self.beta <= 0.0 || self.gamma <= 0.0 || self.epsilon <= 0.0 {
            return Err(Error::InvalidParams(format!(
                "beta, gamma, epsilon must be positive (beta={}, gamma={}, epsilon={})",
                self.beta, self.gamma, self.epsilon
            )));
        }
        if self.xi < 0.0 || self.kappa < 0.0 || self.nu < 0.0 || self.delta < 0.0 {
            return Err(Error::InvalidParams(
                "xi, kappa, nu, delta must be non-negative".into(),
            ));
        }
        let must_be_zero: &[(&str, f64)] = match kind {
            ModelKind::Sir => &[("kappa", self.kappa), ("nu", self.nu), ("delta", self.delta)],
            ModelKind::Sirs => &[("xi", self.xi), ("kappa", self.kappa), ("nu", self.nu)],
            ModelKind::Sirws => &[("delta", self.delta)],
        };
        for (name, v) in must_be_zero {
            if *v != 0.0 {
                return Err(Error::InvalidParams(format!(
                    "{name} = {v} is not used by the {} model and must be 0",
                    kind.name()
                )));
            }
        }
        Ok(())
    }

    /// Endemic-regime guard: r0 must exceed 1.
    pub fn require_endemic(&self) -> Result<()> {
        let r0 = self.r0();
        if r0 > 1.0 {
            Ok(())
        } else {
            Err(Error::NoEndemicEquilibrium { r0 })
        }
    }
}

/// Compartment fractions after eliminating R = 1 - S - I (- W).
/// `w` must be 0 for the two-dimensional kinds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub s: f64,
    pub i: f64,
    #[serde(default)]
    pub w: f64,
}

impl SystemState {
    pub fn planar(s: f64, i: f64) -> Self {
        Self { s, i, w: 0.0 }
    }

    pub fn sirws(s: f64, i: f64, w: f64) -> Self {
        Self { s, i, w }
    }

    /// Simplex invariants: components non-negative, total at most 1
    /// (so the eliminated compartment stays non-negative).
    pub fn validate(&self, kind: ModelKind) -> Result<()> {
        if !kind.has_w() && self.w != 0.0 {
            return Err(Error::Domain(format!(
                "w = {} must be 0 for the {} model",
                self.w,
                kind.name()
            )));
        }
        if !(self.s >= 0.0 && self.i >= 0.0 && self.w >= 0.0) {
            return Err(Error::Domain(format!(
                "state components must be non-negative: ({}, {}, {})",
                self.s, self.i, self.w
            )));
        }
        let total = self.s + self.i + self.w;
        if total > 1.0 + 1e-12 {
            return Err(Error::Domain(format!(
                "state leaves the simplex: S+I+W = {total} > 1"
            )));
        }
        Ok(())
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.s, self.i, self.w]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self { s: a[0], i: a[1], w: a[2] }
    }
}

/// SIRWS state in the logarithmic chart v = ln I, used where I is
/// exponentially small. Also supports the planar kinds (w ignored).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogState {
    pub s: f64,
    pub v: f64,
    pub w: f64,
}

impl LogState {
    /// Requires i > 0.
    pub fn from_state(x: SystemState) -> Result<Self> {
        if x.i <= 0.0 {
            return Err(Error::Domain(format!("cannot take ln of I = {}", x.i)));
        }
        Ok(Self { s: x.s, v: x.i.ln(), w: x.w })
    }

    pub fn to_state(self) -> SystemState {
        SystemState { s: self.s, i: self.v.exp(), w: self.w }
    }
}

/// State derivative, laid out as (dS, dI, dW); dW is 0 for planar kinds.
pub type Deriv = [f64; 3];

/// 3x3 Jacobian in (S, I, W) order; for planar kinds the third row/column
/// is zero.
pub type Jacobian = [[f64; 3]; 3];

#[inline]
fn scale3(a: [f64; 3], c: f64) -> [f64; 3] {
    [c * a[0], c * a[1], c * a[2]]
}

/// Slow-frame right-hand side without validation. `bt` and `gt` are the
/// slow-frame infection/recovery rates beta/epsilon and gamma/epsilon.
#[inline]
pub(crate) fn slow_field_raw(kind: ModelKind, p: &ModelParams, s: f64, i: f64, w: f64) -> Deriv {
    let bt = p.beta / p.epsilon;
    let gt = p.gamma / p.epsilon;
    match kind {
        ModelKind::Sir => [
            p.xi * (1.0 - s) - bt * s * i,
            i * (bt * s - gt - p.xi),
            0.0,
        ],
        ModelKind::Sirs => [
            p.delta * (1.0 - s - i) - bt * s * i,
            i * (bt * s - gt),
            0.0,
        ],
        ModelKind::Sirws => [
            -bt * s * i + 2.0 * p.kappa * w + p.xi * (1.0 - s),
            i * (bt * s - gt - p.xi),
            -p.nu * bt * i * w
                + 2.0 * p.kappa * (1.0 - s - i - w)
                - 2.0 * p.kappa * w
                - p.xi * w,
        ],
    }
}

#[inline]
pub(crate) fn vector_field_raw(
    kind: ModelKind,
    frame: TimeFrame,
    p: &ModelParams,
    s: f64,
    i: f64,
    w: f64,
) -> Deriv {
    let slow = slow_field_raw(kind, p, s, i, w);
    match frame {
        TimeFrame::Slow => slow,
        TimeFrame::Fast => scale3(slow, p.epsilon),
    }
}

/// Full-system right-hand side in the requested frame.
pub fn vector_field(
    kind: ModelKind,
    frame: TimeFrame,
    p: &ModelParams,
    x: SystemState,
) -> Result<Deriv> {
    p.validate(kind)?;
    x.validate(kind)?;
    Ok(vector_field_raw(kind, frame, p, x.s, x.i, x.w))
}

/// Layer (fast subsystem at epsilon = 0) right-hand side in fast time:
/// the classical epidemic block (-beta S I, I(beta S - gamma)), with
/// W' = -nu beta I W for SIRWS.
pub fn layer_field(kind: ModelKind, p: &ModelParams, x: SystemState) -> Result<Deriv> {
    p.validate(kind)?;
    x.validate(kind)?;
    Ok(layer_field_raw(kind, p, x.s, x.i, x.w))
}

#[inline]
pub(crate) fn layer_field_raw(
    kind: ModelKind,
    p: &ModelParams,
    s: f64,
    i: f64,
    w: f64,
) -> Deriv {
    let ds = -p.beta * s * i;
    let di = i * (p.beta * s - p.gamma);
    let dw = match kind {
        ModelKind::Sirws => -p.nu * p.beta * i * w,
        _ => 0.0,
    };
    [ds, di, dw]
}

/// Reduced (slow subsystem at epsilon = 0) flow on the critical manifold
/// I = 0, in slow time. SIR: dS = xi(1-S); SIRS: dS = delta(1-S); SIRWS:
/// the planar (S, W) system dS = 2 kappa W + xi(1-S),
/// dW = 2 kappa (1-S) - (4 kappa + xi) W.
pub fn reduced_field(kind: ModelKind, p: &ModelParams, x: SystemState) -> Result<Deriv> {
    p.validate(kind)?;
    x.validate(kind)?;
    if x.i != 0.0 {
        return Err(Error::Domain(format!(
            "reduced flow is defined on the critical manifold I = 0, got I = {}",
            x.i
        )));
    }
    Ok(match kind {
        ModelKind::Sir => [p.xi * (1.0 - x.s), 0.0, 0.0],
        ModelKind::Sirs => [p.delta * (1.0 - x.s), 0.0, 0.0],
        ModelKind::Sirws => [
            2.0 * p.kappa * x.w + p.xi * (1.0 - x.s),
            0.0,
            2.0 * p.kappa * (1.0 - x.s) - (4.0 * p.kappa + p.xi) * x.w,
        ],
    })
}

/// Log-chart slow-frame right-hand side, (dS, dv, dW) with v = ln I.
/// The chain rule gives dv = dI/I, which removes the vanishing factor.
#[inline]
pub(crate) fn log_slow_field_raw(
    kind: ModelKind,
    p: &ModelParams,
    s: f64,
    v: f64,
    w: f64,
) -> [f64; 3] {
    let bt = p.beta / p.epsilon;
    let gt = p.gamma / p.epsilon;
    let i = v.exp();
    match kind {
        ModelKind::Sir => [p.xi * (1.0 - s) - bt * s * i, bt * s - gt - p.xi, 0.0],
        ModelKind::Sirs => [p.delta * (1.0 - s - i) - bt * s * i, bt * s - gt, 0.0],
        ModelKind::Sirws => [
            -bt * s * i + 2.0 * p.kappa * w + p.xi * (1.0 - s),
            bt * s - gt - p.xi,
            -p.nu * bt * i * w
                + 2.0 * p.kappa * (1.0 - s - i - w)
                - 2.0 * p.kappa * w
                - p.xi * w,
        ],
    }
}

#[inline]
pub(crate) fn log_field_raw(
    kind: ModelKind,
    frame: TimeFrame,
    p: &ModelParams,
    s: f64,
    v: f64,
    w: f64,
) -> [f64; 3] {
    let slow = log_slow_field_raw(kind, p, s, v, w);
    match frame {
        TimeFrame::Slow => slow,
        TimeFrame::Fast => scale3(slow, p.epsilon),
    }
}

/// Log-chart layer field in fast time: dv = beta S - gamma.
#[inline]
pub(crate) fn log_layer_field_raw(
    kind: ModelKind,
    p: &ModelParams,
    s: f64,
    v: f64,
    w: f64,
) -> [f64; 3] {
    let i = v.exp();
    let dw = match kind {
        ModelKind::Sirws => -p.nu * p.beta * i * w,
        _ => 0.0,
    };
    [-p.beta * s * i, p.beta * s - p.gamma, dw]
}

/// Full-system field pushed through the substitution I = e^v. In the fast
/// frame the v-equation reads dv = beta S - gamma - epsilon xi (SIRWS/SIR)
/// up to the exact epsilon scaling used throughout.
pub fn log_field(kind: ModelKind, frame: TimeFrame, p: &ModelParams, x: LogState) -> Result<[f64; 3]> {
    p.validate(kind)?;
    if !(x.s.is_finite() && x.v.is_finite() && x.w.is_finite()) {
        return Err(Error::Domain("log state must be finite".into()));
    }
    Ok(log_field_raw(kind, frame, p, x.s, x.v, x.w))
}

#[inline]
pub(crate) fn jacobian_slow_raw(
    kind: ModelKind,
    p: &ModelParams,
    s: f64,
    i: f64,
    w: f64,
) -> Jacobian {
    let bt = p.beta / p.epsilon;
    let gt = p.gamma / p.epsilon;
    match kind {
        ModelKind::Sir => [
            [-p.xi - bt * i, -bt * s, 0.0],
            [bt * i, bt * s - gt - p.xi, 0.0],
            [0.0, 0.0, 0.0],
        ],
        ModelKind::Sirs => [
            [-p.delta - bt * i, -p.delta - bt * s, 0.0],
            [bt * i, bt * s - gt, 0.0],
            [0.0, 0.0, 0.0],
        ],
        ModelKind::Sirws => {
            let (k2, k4) = (2.0 * p.kappa, 4.0 * p.kappa);
            [
                [-bt * i - p.xi, -bt * s, k2],
                [bt * i, bt * s - gt - p.xi, 0.0],
                [-k2, -p.nu * bt * w - k2, -p.nu * bt * i - k4 - p.xi],
            ]
        }
    }
}

/// Analytic Jacobian of `vector_field` in the requested frame.
pub fn jacobian(
    kind: ModelKind,
    frame: TimeFrame,
    p: &ModelParams,
    x: SystemState,
) -> Result<Jacobian> {
    p.validate(kind)?;
    x.validate(kind)?;
    let slow = jacobian_slow_raw(kind, p, x.s, x.i, x.w);
    Ok(match frame {
        TimeFrame::Slow => slow,
        TimeFrame::Fast => {
            let mut j = slow;
            for row in &mut j {
                for e in row.iter_mut() {
                    *e *= p.epsilon;
                }
            }
            j
        }
    })
}

/// The S-nullcline level I = alpha_eps(S) for SIR, used below for the SIR
/// equilibrium: alpha_eps(S) = epsilon xi (1-S) / (beta S).
fn sir_alpha(p: &ModelParams, s: f64) -> f64 {
    p.epsilon * p.xi * (1.0 - s) / (p.beta * s)
}

/// Interior (endemic) equilibrium. Requires r0 > 1.
///
/// SIR has the closed form S_E = 1/r0 + epsilon xi / beta with
/// I_E = alpha_eps(S_E). SIRS pins S_E = 1/r0 exactly. SIRWS is solved by
/// a damped Newton iteration seeded from the SIR values, with the fast-frame
/// residual driven below 1e-13 max-norm.
pub fn endemic_equilibrium(kind: ModelKind, p: &ModelParams) -> Result<SystemState> {
    p.validate(kind)?;
    p.require_endemic()?;
    match kind {
        ModelKind::Sir => {
            let s = p.gamma / p.beta + p.epsilon * p.xi / p.beta;
            Ok(SystemState::planar(s, sir_alpha(p, s)))
        }
        ModelKind::Sirs => {
            let s = p.gamma / p.beta;
            let i = p.epsilon * p.delta * (1.0 - s) / (p.beta * s + p.epsilon * p.delta);
            Ok(SystemState::planar(s, i))
        }
        ModelKind::Sirws => sirws_equilibrium_newton(p),
    }
}

fn sirws_equilibrium_newton(p: &ModelParams) -> Result<SystemState> {
    // dI = 0 with I > 0 pins S exactly; I and W seeds come from the SIR
    // nullcline and the reduced-flow W-nullcline.
    let s0 = (p.gamma + p.epsilon * p.xi) / p.beta;
    let i0 = sir_alpha(p, s0);
    let denom = 4.0 * p.kappa + p.xi;
    let w0 = if denom > 0.0 { 2.0 * p.kappa * (1.0 - s0) / denom } else { 0.0 };

    let mut y = [s0, i0, w0];
    let res_norm = |y: &[f64; 3]| -> f64 {
        let f = vector_field_raw(ModelKind::Sirws, TimeFrame::Fast, p, y[0], y[1], y[2]);
        f.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    };
    let mut res = res_norm(&y);
    for _ in 0..60 {
        if res < 1e-13 {
            break;
        }
        let f = vector_field_raw(ModelKind::Sirws, TimeFrame::Fast, p, y[0], y[1], y[2]);
        let j = {
            let slow = jacobian_slow_raw(ModelKind::Sirws, p, y[0], y[1], y[2]);
            nalgebra::Matrix3::from_fn(|r, c| p.epsilon * slow[r][c])
        };
        let rhs = nalgebra::Vector3::new(-f[0], -f[1], -f[2]);
        let step = j.lu().solve(&rhs).ok_or_else(|| {
            Error::Convergence("singular Jacobian in equilibrium Newton solve".into())
        })?;
        // Halve the step until the residual decreases.
        let mut lambda = 1.0;
        let mut advanced = false;
        for _ in 0..40 {
            let trial = [y[0] + lambda * step[0], y[1] + lambda * step[1], y[2] + lambda * step[2]];
            let trial_res = res_norm(&trial);
            if trial_res < res {
                y = trial;
                res = trial_res;
                advanced = true;
                break;
            }
            lambda *= 0.5;
        }
        if !advanced {
            break;
        }
    }
    if res >= 1e-12 {
        return Err(Error::Convergence(format!(
            "equilibrium Newton stalled with residual {res:.3e}"
        )));
    }
    let x = SystemState::sirws(y[0], y[1], y[2]);
    let interior =
        x.s > 0.0 && x.i > 0.0 && x.w > 0.0 && x.s + x.i + x.w < 1.0;
    if !interior {
        return Err(Error::Convergence(format!(
            "equilibrium left the open simplex: ({}, {}, {})",
            x.s, x.i, x.w
        )));
    }
    Ok(x)
}
