use thiserror::Error;

/// Errors raised across the PISAC pipeline.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum PisacError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("invalid power {0} (must be strictly positive)")]
    InvalidPower(f64),

    #[error("probability {0} outside the open interval (0, 1)")]
    Domain(f64),

    #[error("estimation degenerate: {0}")]
    EstimationDegenerate(String),

    #[error("infeasible power allocation: {binding} constraint cannot be met ({detail})")]
    Infeasible { binding: String, detail: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("singular steering: |steer| = {0} rad is too close to pi/2")]
    SingularSteering(f64),

    #[error("infeasible start: ego pose already overlaps obstacle {0}")]
    InfeasibleStart(usize),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl PisacError {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            PisacError::Infeasible { .. }
            | PisacError::InfeasibleStart(_)
            | PisacError::Config(_)
            | PisacError::InvalidGeometry(_)
            | PisacError::DegenerateGeometry(_)
            | PisacError::InvalidPower(_)
            | PisacError::Domain(_) => 2,
            PisacError::Solver(_)
            | PisacError::EstimationDegenerate(_)
            | PisacError::SingularSteering(_) => 3,
            PisacError::Unsupported(_) | PisacError::Io(_) => 1,
        }
    }
}

impl From<std::io::Error> for PisacError {
    fn from(e: std::io::Error) -> Self {
        PisacError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, PisacError>;
