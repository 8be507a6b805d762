use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("time {t} outside the horizon [{t0}, {horizon}]")]
    TimeOutOfRange { t: f64, t0: f64, horizon: f64 },

    #[error("state-dependent intensity requires a state path")]
    MissingPath,

    #[error("intensity {value} at t = {t} outside [0, {cap}]")]
    IntensityOutOfRange { t: f64, value: f64, cap: f64 },

    #[error("non-positive volatility {value} on path {path} at step {step}")]
    NonPositiveVolatility { path: usize, step: usize, value: f64 },

    #[error("non-finite value on path {path} at step {step}")]
    NonFinite { path: usize, step: usize },

    #[error("unsupported claim: {0}")]
    UnsupportedClaim(String),

    #[error("measure family is empty")]
    EmptyFamily,

    #[error("path bundles disagree: {0}")]
    InconsistentBundles(String),

    #[error("control grid is empty: {0}")]
    EmptyGrid(&'static str),

    #[error("no volatility control matches Sigma = {sigma2} at t = {t}, x = {x}")]
    EmptyVolatilitySet { t: f64, x: f64, sigma2: f64 },

    #[error("CFL condition violated: dt = {dt} > dx^2 / a_max = {limit}")]
    CflViolation { dt: f64, limit: f64 },

    #[error("PDE blow-up at t = {t}, x = {x}")]
    PdeBlowUp { t: f64, x: f64 },

    #[error("scenario is not Markovian: {0}")]
    NotMarkovian(String),

    #[error("comparison precondition violated: {0}")]
    PreconditionViolated(String),

    #[error("Isaacs condition fails (max gap {gap}); refusing to report a robust value")]
    IsaacsViolation { gap: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
