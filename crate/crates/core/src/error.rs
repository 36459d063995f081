use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("grounded Laplacian is singular: {0}")]
    SingularGrounding(String),

    #[error("communication graph is not connected")]
    NotConnected,

    #[error("matrix is not Hurwitz (spectral abscissa {abscissa:.3e})")]
    NotHurwitz { abscissa: f64 },

    #[error("no stabilizing Riccati solution: {0}")]
    NoStabilizingSolution(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not symmetric (max asymmetry {0:.3e})")]
    NotSymmetric(f64),

    #[error("estimated T matrix is numerically singular for agent {agent}")]
    SingularEstimate { agent: usize },

    #[error("numeric blowup at t = {t}: state norm {norm:.3e}")]
    NumericBlowup { t: f64, norm: f64 },

    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("verification cap exceeded: {0}")]
    CapExceeded(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Stable machine-readable identifier used in JSON reports and the C ABI.
    pub fn code(&self) -> &'static str {
        match self {
            Error::SingularGrounding(_) => "SingularGrounding",
            Error::NotConnected => "NotConnected",
            Error::NotHurwitz { .. } => "NotHurwitz",
            Error::NoStabilizingSolution(_) => "NoStabilizingSolution",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::NotSymmetric(_) => "NotSymmetric",
            Error::SingularEstimate { .. } => "SingularEstimate",
            Error::NumericBlowup { .. } => "NumericBlowup",
            Error::InvalidTopology(_) => "InvalidTopology",
            Error::Parse(_) => "ParseError",
            Error::Validation(_) => "ValidationError",
            Error::CapExceeded(_) => "CapExceeded",
            Error::Io(_) => "IoError",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
