use thiserror::Error;

/// Failure of a CLI command, carrying its exit status.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, bad config, or an input file that is missing or malformed.
    #[error("{0}")]
    Usage(String),
    /// Anything that goes wrong after the inputs were accepted.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub const USAGE_EXIT: i32 = 2;
    pub const RUNTIME_EXIT: i32 = 1;

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => Self::USAGE_EXIT,
            CliError::Runtime(_) => Self::RUNTIME_EXIT,
        }
    }

    pub fn usage(e: impl std::fmt::Display) -> Self {
        CliError::Usage(e.to_string())
    }

    pub fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    )*};
}

runtime_from!(
    permweave::model::ModelError,
    permweave::trainer::TrainError,
    permweave::activations::ActivationError,
    permweave::align::AlignError,
    permweave::merge::MergeError,
    std::io::Error
);
