use thiserror::Error;

/// Errors produced by the model, map, and engine layers.
#[derive(Debug, Error)]
pub enum Error {
    /// Parameter record fails validation for the requested model kind.
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    /// Input lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Endemic-regime operation called with r0 <= 1.
    #[error("no endemic equilibrium: r0 = {r0} <= 1")]
    NoEndemicEquilibrium { r0: f64 },

    /// A bracketed root search could not establish or keep a sign change.
    #[error("root bracketing failed: {0}")]
    Bracket(String),

    /// An iterative solve stopped without reaching its tolerance.
    #[error("no convergence: {0}")]
    Convergence(String),

    /// The accumulated attraction never pays off before the horizon/cap.
    #[error("no exit found: {0}")]
    NoExit(String),

    /// Entry-exit hypotheses violated by the supplied integrands.
    #[error("hypothesis violated: {0}")]
    Hypothesis(String),

    /// Adaptive step size underflowed; the problem is too stiff for the
    /// explicit pair in this chart.
    #[error("integration stalled at t = {t}: step size {h} below the representable floor")]
    Stiffness { t: f64, h: f64 },

    /// Run configuration is malformed (CLI exit code 2).
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for configuration problems,
    /// 3 for numerical/runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
