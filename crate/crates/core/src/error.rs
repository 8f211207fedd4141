use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: dimension {dim} expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        dim: usize,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("loss is not a finite scalar")]
    NonFiniteLoss,

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    DivergedAt { epoch: usize, batch: usize },

    #[error("timestep {t} out of range [0, {steps})")]
    TimestepOutOfRange { t: usize, steps: usize },

    #[error("invalid noise schedule: {0}")]
    Schedule(String),

    #[error("invalid architecture: {0}")]
    Architecture(String),

    #[error("block {0} is not active")]
    BlockInactive(usize),

    #[error("block {0} does not exist")]
    NoSuchBlock(usize),

    #[error("cannot select {k} blocks from {active} active blocks (at least one must remain)")]
    TooManyBlocks { k: usize, active: usize },

    #[error("empty batch in {0}")]
    EmptyBatch(&'static str),

    #[error("property sets differ: {0}")]
    PropertyMismatch(String),

    #[error("unknown property `{0}`")]
    UnknownProperty(String),

    #[error("invalid mixture: {0}")]
    Mixture(String),

    #[error("invalid config at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("stage {stage}: no preference pairs survived curation ({hint})")]
    EmptyPairSet { stage: usize, hint: String },

    #[error("stage {stage}: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
