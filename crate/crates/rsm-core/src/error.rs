use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// An argument fell outside the set on which the operation is defined.
    #[error("{what} = {value} is outside {domain}")]
    Domain {
        what: &'static str,
        value: f64,
        domain: &'static str,
    },
    /// A requested step noise exceeds the variance the kernel can absorb.
    #[error("step noise variance {sigma_sq} exceeds the admissible bound {limit}")]
    InvalidNoise { sigma_sq: f64, limit: f64 },
    /// A coefficient diverges at the requested point.
    #[error("singular coefficient: {0}")]
    Singular(String),
    /// `w = Ωδ/σ` was requested for a deterministic step.
    #[error("sampler weight is undefined when sigma = 0")]
    UndefinedWeight,
    /// Inputs violate an operation's calling contract.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A configuration failed validation.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// Optimisation produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),
}

pub type Result<T> = std::result::Result<T, Error>;
