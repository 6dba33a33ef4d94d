use std::fmt;

use hiersplat_core::datasets::DatasetError;
use hiersplat_core::gaussian_map::MapError;
use hiersplat_core::semantic_tree::TreeError;
use hiersplat_core::slam::SlamError;
use hiersplat_taxonomy::llm_client::LlmError;
use hiersplat_taxonomy::tree_builder::BuildError;

/// Process exit codes.
pub const EXIT_GENERIC: u8 = 1;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_CONFIG: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn generic(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_GENERIC,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::generic(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::config(e.to_string())
    }
}

impl From<LlmError> for CliError {
    fn from(e: LlmError) -> Self {
        match e {
            LlmError::CredentialMissing => Self::config(e.to_string()),
            e => Self::generic(e.to_string()),
        }
    }
}

impl From<BuildError> for CliError {
    fn from(e: BuildError) -> Self {
        match e {
            BuildError::LlmUnavailable(inner) => inner.into(),
            BuildError::InvalidInput(_) | BuildError::MissingEmbedding(_) | BuildError::Shapes(_) => {
                Self::config(e.to_string())
            }
            e => Self::generic(e.to_string()),
        }
    }
}

impl From<TreeError> for CliError {
    fn from(e: TreeError) -> Self {
        Self::config(format!("tree: {e}"))
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Manifest(_) => Self::config(e.to_string()),
            e => Self::generic(e.to_string()),
        }
    }
}

impl From<MapError> for CliError {
    fn from(e: MapError) -> Self {
        Self::generic(e.to_string())
    }
}

impl From<SlamError> for CliError {
    fn from(e: SlamError) -> Self {
        match e {
            SlamError::Config(_) | SlamError::Tree(_) => Self::config(e.to_string()),
            SlamError::Dataset(d) => d.into(),
            e => Self::generic(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
