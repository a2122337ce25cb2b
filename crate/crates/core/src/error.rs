use std::fmt;
use std::path::PathBuf;

use serde::Serialize;

/// Severity of a [`Diagnostic`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

/// A non-fatal finding about a model, tree or plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub node: Option<String>,
    pub message: String,
}

impl Diagnostic {
    pub fn error(node: Option<&str>, message: impl Into<String>) -> Self {
        Diagnostic {
            severity: Severity::Error,
            node: node.map(str::to_owned),
            message: message.into(),
        }
    }

    pub fn warning(node: Option<&str>, message: impl Into<String>) -> Self {
        Diagnostic {
            severity: Severity::Warning,
            node: node.map(str::to_owned),
            message: message.into(),
        }
    }

    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let level = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        match &self.node {
            Some(node) => write!(f, "{level} [{node}]: {}", self.message),
            None => write!(f, "{level}: {}", self.message),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed model: {0}")]
    Parse(String),

    #[error("tensor `{tensor}` has unsupported element type {dtype}")]
    UnsupportedDtype { tensor: String, dtype: i32 },

    #[error("model failed validation:\n{}", render_diagnostics(.0))]
    Validation(Vec<Diagnostic>),

    #[error("unknown fixture template `{0}`")]
    UnknownTemplate(String),

    #[error("graph contains a cycle through node `{node}`")]
    Cycle { node: String },

    #[error("cannot infer shape of `{node}` ({op}): {reason}")]
    UnsupportedOpShape {
        node: String,
        op: String,
        reason: String,
    },

    #[error("shape mismatch at `{node}`: {detail}")]
    ShapeMismatch { node: String, detail: String },

    #[error("operator `{op}` is not in the attribute registry")]
    UnknownOperator { op: String },

    #[error("operator `{op}` is already classified")]
    Conflict { op: String },

    #[error("association tree rooted at `{root}` exceeded {limit} nodes")]
    UnboundedTree { root: String, limit: usize },

    #[error("coupled nodes `{a}` ({ca} channels) and `{b}` ({cb} channels) disagree on channel count")]
    ChannelMismatch {
        a: String,
        ca: usize,
        b: String,
        cb: usize,
    },

    #[error("axis error: {0}")]
    Axis(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("reference index set is empty")]
    EmptyReference,

    #[error("cannot rewrite `{node}`: {reason}")]
    UnsupportedRewrite { node: String, reason: String },

    #[error("internal mask conflict: {0}")]
    MaskConflict(String),

    #[error("interpreter does not support `{op}` (node `{node}`)")]
    UnsupportedOp { node: String, op: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn render_diagnostics(diags: &[Diagnostic]) -> String {
    diags
        .iter()
        .map(|d| format!("  {d}"))
        .collect::<Vec<_>>()
        .join("\n")
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
