use thiserror::Error;

/// Errors raised by the simulation and analysis routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// An argument is outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A group has no (weighted) events, so its hazard cannot be estimated.
    #[error("degenerate fit: no events in {0}")]
    DegenerateFit(String),

    /// The log-rank test has no events to compare.
    #[error("log-rank test undefined: {0}")]
    TestUndefined(String),

    #[error("infeasible design: {0}")]
    InfeasibleDesign(String),

    #[error("infeasible plan: {0}")]
    InfeasiblePlan(String),

    /// The posterior log-density cannot be evaluated at the starting point.
    #[error("sampler initialization failed: {0}")]
    SamplerInit(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
