use thiserror::Error;

/// Errors produced by the spectral, autodiff, model and corruption layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("value error: {0}")]
    Value(String),

    /// A caller violated an operation's precondition (wrong layout, wrong op usage).
    #[error("contract error: {0}")]
    Contract(String),

    /// All spectral power sits at DC, usually a vanishing input-gradient.
    #[error("degenerate spectrum: non-DC power {power:e} is below {threshold:e}")]
    DegenerateSpectrum { power: f64, threshold: f64 },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

pub(crate) fn value_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Value(msg.into()))
}

pub(crate) fn contract_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
