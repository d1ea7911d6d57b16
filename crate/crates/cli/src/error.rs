use std::process::ExitCode;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            Self::Usage(_) => 2,
            Self::Data(_) => 3,
            Self::Numerical(_) => 4,
        })
    }
}

impl From<icicl_core::Error> for CliError {
    fn from(e: icicl_core::Error) -> Self {
        use icicl_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) => Self::Usage(msg),
            E::Numerical(_) | E::Domain(_) | E::DegenerateMask { .. } => Self::Numerical(msg),
            E::Shape(_) | E::EmptyKeys | E::InvalidTask(_) | E::Format(_) | E::Io(_) => Self::Data(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
