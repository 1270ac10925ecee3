use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors reported by sketch construction, analysis, training and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("compression unit is empty")]
    EmptyUnit,

    #[error("weight count mismatch: state holds {expected}, caller asked for {got}")]
    CountMismatch { expected: u64, got: u64 },

    #[error("address {addr} was never inserted (unit holds {count} weights)")]
    NotInserted { addr: u64, count: u64 },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("probability must lie in (0, 1), got {0}")]
    InvalidProbability(f64),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("allocation floor infeasible: {units} units x floor {floor} exceeds budget {budget}")]
    InfeasibleFloor {
        units: usize,
        floor: u32,
        budget: u64,
    },

    #[error("index {index} out of range ({limit})")]
    IndexOutOfRange { index: usize, limit: usize },

    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },

    #[error("malformed container: {0}")]
    MalformedContainer(String),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
