use std::path::PathBuf;

use docpack::corpus::CorpusError;
use docpack::evalharness::EvalError;
use docpack::judgeclient::JudgeError;
use docpack::maskgen::MaskError;
use docpack::packer::PackError;
use docpack::stats::StatsError;
use thiserror::Error;

/// Exit codes. Argument parsing errors also exit with [`EXIT_CONFIG`].
pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_TRANSPORT: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    /// Bad input data; `module` is the library module that rejected it.
    #[error("{module}: {message}")]
    Data {
        module: &'static str,
        message: String,
    },
    #[error("judgeclient: {0}")]
    Transport(String),
    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data { .. } => EXIT_DATA,
            CliError::Transport(_) => EXIT_TRANSPORT,
            CliError::Io { .. } => EXIT_IO,
        }
    }

    pub(crate) fn data(module: &'static str, message: impl ToString) -> Self {
        CliError::Data {
            module,
            message: message.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::InvalidVocab(m) => CliError::Config(m),
            e => CliError::data("corpus", e),
        }
    }
}

impl From<PackError> for CliError {
    fn from(e: PackError) -> Self {
        match e {
            PackError::InvalidStrategy(_)
            | PackError::InvalidMode(_)
            | PackError::InvalidBatchSize => CliError::Config(e.to_string()),
            e => CliError::data("packer", e),
        }
    }
}

impl From<StatsError> for CliError {
    fn from(e: StatsError) -> Self {
        CliError::data("stats", e)
    }
}

impl From<MaskError> for CliError {
    fn from(e: MaskError) -> Self {
        CliError::data("maskgen", e)
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::data("evalharness", e)
    }
}

impl From<JudgeError> for CliError {
    fn from(e: JudgeError) -> Self {
        match e {
            JudgeError::Transport { .. } => CliError::Transport(e.to_string()),
            JudgeError::MissingApiKey(_) => CliError::Config(e.to_string()),
            e => CliError::data("judgeclient", e),
        }
    }
}
