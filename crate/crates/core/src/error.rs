use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure classes surfaced by the library. The CLI maps these onto exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("failed to spawn engine `{path}`: {source}")]
    Spawn {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("engine did not answer `{waiting_for}` within {timeout_ms} ms")]
    Timeout { waiting_for: String, timeout_ms: u128 },

    #[error("engine rejected option `{name}`: {message}")]
    OptionRejected { name: String, message: String },

    #[error("engine session is dead: {0}")]
    SessionDead(String),

    #[error("engine reported no WDL before bestmove")]
    MissingWdl,

    #[error("malformed engine output `{0}`")]
    Protocol(String),

    #[error("illegal move `{mv}` at ply {ply}")]
    IllegalMove { mv: String, ply: usize },

    #[error("invalid WDL triple {win}/{draw}/{lose}: components must lie in [0, 1000] and sum to 1000")]
    InvalidWdl { win: i64, draw: i64, lose: i64 },

    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("training diverged at epoch {epoch} (loss is not finite)")]
    Diverged { epoch: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures that originate in an engine process or its protocol.
    pub fn is_engine_failure(&self) -> bool {
        matches!(
            self,
            Error::Spawn { .. }
                | Error::Timeout { .. }
                | Error::OptionRejected { .. }
                | Error::SessionDead(_)
                | Error::MissingWdl
                | Error::Protocol(_)
        )
    }
}
