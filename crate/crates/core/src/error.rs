use thiserror::Error;

/// Errors produced by the algebra, model, simulation and sifting layers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix is not unitary (residual {residual:.3e})")]
    NotUnitary { residual: f64 },

    #[error("state is not maximally entangled (concurrence {concurrence:.9})")]
    NotMaximallyEntangled { concurrence: f64 },

    #[error("{what} out of range: {value}")]
    OutOfRange { what: &'static str, value: f64 },

    #[error("no coincidences to estimate a visibility from")]
    EmptyCounts,

    #[error("visibility uncertainty requires at least one coincidence")]
    ZeroCounts,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_range(what: &'static str, value: f64, lo: f64, hi: f64) -> Result<f64> {
    if value.is_finite() && value >= lo && value <= hi {
        Ok(value)
    } else {
        Err(Error::OutOfRange { what, value })
    }
}
