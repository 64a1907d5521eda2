use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument fell outside the domain an operation is defined on.
    #[error("domain error: {0}")]
    Domain(String),

    /// Sample ids that are not present in every prediction set.
    #[error("alignment error: sample ids not shared by all prediction sets: {}", .ids.join(", "))]
    Alignment { ids: Vec<String> },

    #[error("label conflict for sample `{sample_id}`: prediction sets disagree on the true label")]
    LabelConflict { sample_id: String },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("unsupported arity: {0} models (supported: 1..=4)")]
    UnsupportedArity(usize),

    #[error("format error: {0}")]
    Format(String),

    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
