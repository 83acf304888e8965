use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("quadrature did not converge: estimate {estimate}, error estimate {error:e} after {intervals} intervals")]
    Quadrature {
        estimate: f64,
        error: f64,
        intervals: usize,
    },

    /// A model produced an asymmetry outside [-1, 1]; the sampler cannot bound it.
    #[error("envelope violation: asymmetry {value} outside [-1, 1] at t1={t1} ps, t2={t2} ps")]
    Envelope { value: f64, t1: f64, t2: f64 },

    #[error("bin {bin} is empty (n_of + n_sf = 0)")]
    EmptyBin { bin: usize },

    #[error("binning mismatch: {0}")]
    BinningMismatch(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("fit minimum at search boundary: {value} in [{lo}, {hi}]")]
    FitBoundary { value: f64, lo: f64, hi: f64 },

    #[error("malformed input ({location}): {message}")]
    Parse { location: String, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }

    /// Numerical failures as opposed to bad inputs or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Quadrature { .. }
                | Error::Envelope { .. }
                | Error::Numerical(_)
                | Error::FitBoundary { .. }
        )
    }
}
