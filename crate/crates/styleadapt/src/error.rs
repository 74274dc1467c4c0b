use std::path::PathBuf;

use styleadapt_core::Error as CoreError;

/// Stable identifiers for the configuration failures callers may want to
/// tell apart.
pub mod codes {
    pub const LAMBDA_RANGE: &str = "lambda-range";
    pub const STACK_TRAIN: &str = "stack-train";
    pub const VOCAB_MISMATCH: &str = "vocab-mismatch";
    pub const SYNTAX: &str = "syntax";
    pub const INVALID: &str = "invalid";
    pub const PLAN: &str = "plan";
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error [{code}]: {message}")]
    Config { code: &'static str, message: String },
    #[error("stage order error: `{artifact}` not found; run `{stage}` first")]
    StageOrder { artifact: String, stage: &'static str },
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn config(code: &'static str, message: impl Into<String>) -> Self {
        CliError::Config { code, message: message.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        CliError::Format { path: path.into(), message: message.into() }
    }

    /// Process exit status: 2 configuration, 3 stage order, 4 numerical,
    /// 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::StageOrder { .. } => 3,
            CliError::Numerical(_) => 4,
            CliError::Format { .. } | CliError::Io { .. } => 1,
            CliError::Core(e) => match e {
                CoreError::Numerical(_) => 4,
                CoreError::Config(_)
                | CoreError::PlanParse { .. }
                | CoreError::Directive(_)
                | CoreError::Routing(_)
                | CoreError::Wiring(_)
                | CoreError::Load(_)
                | CoreError::Coverage { .. }
                | CoreError::LabelCoverage(_)
                | CoreError::Contract(_) => 2,
                _ => 1,
            },
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
