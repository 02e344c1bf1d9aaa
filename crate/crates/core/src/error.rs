//! Error type shared by all modules.

/// Errors surfaced by the rate-function library.
#[derive(Debug, thiserror::Error)]
pub enum LdpError {
    /// Matrix or vector dimensions are inconsistent with each other.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A claimed-PSD input fails the PSD check beyond tolerance.
    #[error("matrix is not positive semidefinite: {0}")]
    NotPsd(String),

    /// An activation name is not in the registry.
    #[error("unknown activation `{0}`")]
    UnknownActivation(String),

    /// A declared property of a custom activation fails its sampled audit.
    #[error("activation audit failed: {0}")]
    ActivationAudit(String),

    /// A structural or semantic validation failure (bad field values).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The requested quantity is outside the domain (e.g. gradient of a
    /// divergent cumulant generating function).
    #[error("domain error: {0}")]
    Domain(String),

    /// An estimation procedure could not produce a usable result
    /// (e.g. no width in the schedule registered a single hit).
    #[error("estimation failed: {0}")]
    Estimation(String),
}

pub type Result<T> = std::result::Result<T, LdpError>;
