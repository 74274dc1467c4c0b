use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("schema coverage error: template `{template}` cannot realize {combination}")]
    Coverage { template: String, combination: String },
    #[error("label coverage error: {0}")]
    LabelCoverage(String),
    #[error("validation error at line {line}: {message}")]
    Validation { line: usize, message: String },
    #[error("empty split: {0}")]
    EmptySplit(String),
    #[error("sequence of length {len} exceeds max_len {max}")]
    Length { len: usize, max: usize },
    #[error("wiring error: {0}")]
    Wiring(String),
    #[error("routing error: {0}")]
    Routing(String),
    #[error("directive error: {0}")]
    Directive(String),
    #[error("plan parse error at position {position}: {message}")]
    PlanParse { position: usize, message: String },
    #[error("input error: {0}")]
    Input(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("load error: {0}")]
    Load(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numerical error: {0}")]
    Numerical(String),
}
