use thiserror::Error;

/// Errors raised while loading or validating a workload configuration.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("{0}")]
    Invalid(String),
    #[error("unknown policy `{0}` (expected one of {1})")]
    UnknownPolicy(String, String),
    #[error("unknown builtin workload `{0}`")]
    UnknownBuiltin(String),
    #[error("unknown device profile `{0}`")]
    UnknownProfile(String),
    #[error("failed to read `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ConfigError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        ConfigError::Invalid(msg.into())
    }
}

/// Errors raised by the simulation engine. Invariant violations carry a
/// short diagnostic trace of the most recent events.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("simulator invariant violated at t={time_ns}ns: {what}\nrecent events:\n{trace}")]
    Invariant {
        time_ns: u64,
        what: String,
        trace: String,
    },
    #[error("deadlock: event queue drained with {waiting} blocked activities\nrecent events:\n{trace}")]
    Deadlock { waiting: usize, trace: String },
}

/// Errors raised while writing report files.
#[derive(Debug, Error)]
pub enum ReportError {
    #[error("failed to write `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Missing row in the profiling lookup table; callers fall back to the
/// task-level mean.
#[derive(Debug, Error)]
#[error("no lookup row for kernel_id={kernel_id} grid={grid} block={block}")]
pub struct LookupMiss {
    pub kernel_id: u64,
    pub grid: u32,
    pub block: u32,
}
