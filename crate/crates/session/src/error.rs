use thiserror::Error;

use crate::config::ConfigError;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] splitwire::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
