use thiserror::Error;

/// Errors raised across the laboratory. Variants map onto the CLI exit codes
/// through [`LabError::exit_code`].
#[derive(Debug, Error)]
pub enum LabError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("construction error: {0}")]
    Construction(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("ellipticity violation: a11 = {value} < s0 = {s0} at t = {t}, x = {x}")]
    Ellipticity { value: f64, s0: f64, t: f64, x: f64 },
    #[error("saturation: combined log-weight {log_weight:.3e} exceeds the overflow threshold ({context})")]
    Saturation { log_weight: f64, context: String },
    #[error("divergence at time step {step}: non-finite state")]
    Divergence { step: usize },
    #[error("node {0} has no children")]
    NoChildren(usize),
    #[error("refused: {0}")]
    Refused(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl LabError {
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) | LabError::Parameter(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
