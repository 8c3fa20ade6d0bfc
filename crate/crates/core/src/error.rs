use std::fmt;

use thiserror::Error;

/// Factorization stage at which a numerical failure occurred.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    KnotCovariance,
    PosteriorPrecision,
    SchurComplement,
    BetaPrecision,
    LatentPrecision,
    Simulation,
    DenseCovariance,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::KnotCovariance => "knot covariance",
            Stage::PosteriorPrecision => "chol(J^-1 + W'W)",
            Stage::SchurComplement => "chol(I - HH')",
            Stage::BetaPrecision => "beta full-conditional precision",
            Stage::LatentPrecision => "latent knot-effect conditional",
            Stage::Simulation => "simulation covariance",
            Stage::DenseCovariance => "dense covariance",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure at {stage}: {detail}")]
    Numerical { stage: Stage, detail: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn numerical(stage: Stage, detail: impl Into<String>) -> Self {
        Error::Numerical {
            stage,
            detail: detail.into(),
        }
    }

    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io(_) | Error::Csv(_) => 3,
            Error::Numerical { .. } => 4,
        }
    }

    /// Short machine-parsable code.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Config(_) => "E_CONFIG",
            Error::Data(_) => "E_DATA",
            Error::Io(_) => "E_IO",
            Error::Csv(_) => "E_CSV",
            Error::Numerical { .. } => "E_NUMERIC",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_and_exit_statuses() {
        let cases = [
            (Error::Config("x".into()), "E_CONFIG", 2),
            (Error::Data("x".into()), "E_DATA", 3),
            (Error::Io(std::io::Error::other("x")), "E_IO", 3),
            (Error::numerical(Stage::KnotCovariance, "x"), "E_NUMERIC", 4),
        ];
        for (e, code, exit) in cases {
            assert_eq!(e.code(), code);
            assert_eq!(e.exit_code(), exit);
        }
    }

    #[test]
    fn numerical_message_names_stage() {
        let e = Error::numerical(Stage::SchurComplement, "not positive definite");
        assert_eq!(e.to_string(), "numerical failure at chol(I - HH'): not positive definite");
    }
}
