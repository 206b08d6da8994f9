use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),

    #[error("cannot read {path}: {source}")]
    ReadConfig { path: PathBuf, source: std::io::Error },

    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },

    #[error("simulation error: {0}")]
    Runtime(snitch_core::Error),

    #[error("{0}")]
    Other(String),
}

impl From<snitch_core::Error> for HarnessError {
    fn from(e: snitch_core::Error) -> Self {
        match e {
            snitch_core::Error::InvalidConfig { .. } => HarnessError::Config(e.to_string()),
            other => HarnessError::Runtime(other),
        }
    }
}

impl HarnessError {
    /// 1 for configuration problems, 2 for everything that fails at run time.
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Config(_) | HarnessError::ReadConfig { .. } => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
