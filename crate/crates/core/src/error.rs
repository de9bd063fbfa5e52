use thiserror::Error;

use crate::ir::Diagnostic;

/// Errors surfaced by the library. Validation problems carry the full
/// diagnostic list so callers can print every violation at once.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{}", format_diagnostics(.0))]
    Invalid(Vec<Diagnostic>),

    #[error("{}", format_parse(.0))]
    Parse(Vec<ParseDiagnostic>),

    #[error("merge of {members:?} rejected: {reason}")]
    Merge { members: Vec<u32>, reason: String },

    #[error("lowering failed at rank {rank}: {message}")]
    Lowering { rank: String, message: String },

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("execution error: {0}")]
    Exec(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// A lexical or syntactic problem, positioned at a 1-based line and column.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct ParseDiagnostic {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl std::fmt::Display for ParseDiagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}: {}", self.line, self.column, self.message)
    }
}

fn format_diagnostics(d: &[Diagnostic]) -> String {
    d.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

fn format_parse(d: &[ParseDiagnostic]) -> String {
    d.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
