use std::time::Duration;

use thiserror::Error;

use crate::prompt_tree::NodeId;

pub type Result<T, E = LadderError> = std::result::Result<T, E>;

/// Every failure the engine can report.
///
/// Each variant has a stable machine-readable [`code`](LadderError::code) so the
/// service layer can map it onto a structured error body.
#[derive(Debug, Error)]
pub enum LadderError {
    #[error("block {0} not found")]
    NotFound(NodeId),

    #[error("revision {seq} not found on block {block}")]
    RevisionNotFound { block: NodeId, seq: u64 },

    #[error("invalid relation: {0}")]
    InvalidRelation(String),

    #[error("invalid target: {0}")]
    InvalidTarget(String),

    #[error("moving {id} under {new_parent} would create a cycle")]
    Cycle { id: NodeId, new_parent: NodeId },

    #[error("position {position} out of bounds for {len} children")]
    Index { position: usize, len: usize },

    #[error("range {start}..{end} out of bounds (length {len})")]
    Range { start: usize, end: usize, len: usize },

    #[error("input of {len} bytes exceeds the {limit} byte limit")]
    InputTooLarge { len: usize, limit: usize },

    #[error("parse error at {path}: {message}")]
    Parse { path: String, message: String },

    #[error("composition error in block {block}: {message}")]
    Composition { block: NodeId, message: String },

    #[error("edit spans code owned by more than one block ({0})")]
    AmbiguousEdit(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("request of {size} bytes exceeds the context budget of {budget} bytes")]
    ContextOverflow { size: usize, budget: usize },

    #[error("backend unavailable after {attempts} attempts: {message}")]
    BackendUnavailable { attempts: u32, message: String },

    #[error("backend rejected the request: {0}")]
    BackendRejected(String),

    #[error("no mock fixture for template `{template}` with key {key}")]
    MockMiss { template: String, key: String },

    #[error("template error in `{template}`: {message}")]
    Template { template: String, message: String },

    #[error("malformed model response: {message}")]
    ResponseFormat { message: String },

    #[error("run timed out after {:?}", .limit)]
    Timeout {
        limit: Duration,
        partial: Box<crate::executor::RunResult>,
    },

    #[error("runner unavailable: {0}")]
    RunnerUnavailable(String),

    #[error("cancelled")]
    Cancelled,

    #[error("script error at op {index}: {message}")]
    Script { index: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl LadderError {
    pub fn code(&self) -> &'static str {
        match self {
            LadderError::NotFound(_) | LadderError::RevisionNotFound { .. } => "not_found",
            LadderError::InvalidRelation(_) => "invalid_relation",
            LadderError::InvalidTarget(_) => "invalid_target",
            LadderError::Cycle { .. } => "cycle",
            LadderError::Index { .. } => "index",
            LadderError::Range { .. } => "range",
            LadderError::InputTooLarge { .. } => "input_too_large",
            LadderError::Parse { .. } => "parse",
            LadderError::Composition { .. } => "composition",
            LadderError::AmbiguousEdit(_) => "ambiguous_edit",
            LadderError::Precondition(_) => "precondition",
            LadderError::ContextOverflow { .. } => "context_overflow",
            LadderError::BackendUnavailable { .. } => "backend_unavailable",
            LadderError::BackendRejected(_) => "backend_rejected",
            LadderError::MockMiss { .. } => "mock_miss",
            LadderError::Template { .. } => "template",
            LadderError::ResponseFormat { .. } => "response_format",
            LadderError::Timeout { .. } => "timeout",
            LadderError::RunnerUnavailable(_) => "runner_unavailable",
            LadderError::Cancelled => "cancelled",
            LadderError::Script { .. } => "script",
            LadderError::Io(_) => "io",
        }
    }

    /// Location inside a document the error refers to, when there is one.
    pub fn path(&self) -> Option<String> {
        match self {
            LadderError::Parse { path, .. } => Some(path.clone()),
            LadderError::NotFound(id) => Some(format!("nodes/{id}")),
            LadderError::RevisionNotFound { block, seq } => {
                Some(format!("nodes/{block}/revisions/{seq}"))
            }
            LadderError::Composition { block, .. } => Some(format!("nodes/{block}/segment_text")),
            LadderError::Script { index, .. } => Some(format!("ops[{index}]")),
            _ => None,
        }
    }

    pub(crate) fn parse(path: impl Into<String>, message: impl Into<String>) -> Self {
        LadderError::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn response(message: impl Into<String>) -> Self {
        LadderError::ResponseFormat {
            message: message.into(),
        }
    }
}
