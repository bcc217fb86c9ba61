use thiserror::Error;

/// Every failure the library can report.
///
/// Variants map onto a stable machine-readable code (see [`DlrError::code`]) which the
/// command-line front end prints on stderr.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum DlrError {
    #[error("power must be non-negative, got {0}")]
    NegativePower(f64),

    #[error("invalid curve: {0}")]
    InvalidCurve(String),

    #[error("invalid device: {0}")]
    InvalidDevice(String),

    #[error("invalid signal: {0}")]
    InvalidSignal(String),

    #[error("requested energy {requested} MWh exceeds the fleet's {available} MWh")]
    EnergyExceedsFleet { requested: f64, available: f64 },

    #[error("energy must be non-negative, got {0}")]
    NegativeEnergy(f64),

    #[error("signal level {level} at step {index} is negative; expected a pure discharge signal")]
    NotDischargeSignal { index: usize, level: f64 },

    #[error("step {step} infeasible: requested {requested} MWh but at most {available} MWh can be delivered")]
    InfeasibleStep {
        step: usize,
        requested: f64,
        available: f64,
    },

    #[error("reservation violated: {0}")]
    ReservationViolated(String),

    #[error("window of {window} h is not an integer multiple of the sample period {dt} h")]
    AlignmentError { window: f64, dt: f64 },

    #[error("window has no non-zero samples")]
    EmptyWindow,

    #[error("correlation undefined: {0}")]
    Undefined(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unsupported format: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(String),
}

impl DlrError {
    pub fn code(&self) -> &'static str {
        match self {
            DlrError::NegativePower(_) => "NEGATIVE_POWER",
            DlrError::InvalidCurve(_) => "INVALID_CURVE",
            DlrError::InvalidDevice(_) => "INVALID_DEVICE",
            DlrError::InvalidSignal(_) => "INVALID_SIGNAL",
            DlrError::EnergyExceedsFleet { .. } => "ENERGY_EXCEEDS_FLEET",
            DlrError::NegativeEnergy(_) => "NEGATIVE_ENERGY",
            DlrError::NotDischargeSignal { .. } => "NOT_DISCHARGE_SIGNAL",
            DlrError::InfeasibleStep { .. } => "INFEASIBLE_STEP",
            DlrError::ReservationViolated(_) => "RESERVATION_VIOLATED",
            DlrError::AlignmentError { .. } => "ALIGNMENT_ERROR",
            DlrError::EmptyWindow => "EMPTY_WINDOW",
            DlrError::Undefined(_) => "UNDEFINED",
            DlrError::Parse { .. } => "PARSE_ERROR",
            DlrError::Format(_) => "FORMAT_ERROR",
            DlrError::Io(_) => "IO_ERROR",
        }
    }

    /// Errors that mean "the request cannot be served" rather than "the input is malformed".
    pub fn is_rejection(&self) -> bool {
        matches!(
            self,
            DlrError::EnergyExceedsFleet { .. }
                | DlrError::InfeasibleStep { .. }
                | DlrError::ReservationViolated(_)
        )
    }
}

impl From<std::io::Error> for DlrError {
    fn from(e: std::io::Error) -> Self {
        DlrError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, DlrError>;
