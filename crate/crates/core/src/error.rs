use thiserror::Error;

/// Errors raised by the model, problem assembly and solver layers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("ill-posed model at prediction step {step}: A0 reciprocal condition {rcond:e}")]
    IllPosedModel { step: usize, rcond: f64 },
    #[error("column index {index} out of range 1..={n}")]
    ColumnOutOfRange { index: usize, n: usize },
    #[error("column {0} is already in the free set")]
    AlreadyFree(usize),
    #[error("column {0} is not in the free set")]
    NotFree(usize),
    #[error("free column {column} is numerically rank deficient")]
    RankDeficient { column: usize },
    #[error("singular triangular factor at position {position}")]
    SingularFactor { position: usize },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            what,
            expected,
            got,
        })
    }
}
