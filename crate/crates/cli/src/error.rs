use serde_json::{json, Value};

use einfuse_core::Error;

pub const EXIT_DIAGNOSTICS: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation: unknown names, unreadable files, malformed flag values.
    Usage(String),
    /// The workload itself is rejected or a check failed.
    Diagnostics {
        kind: &'static str,
        message: String,
        details: Value,
    },
}

impl CliError {
    pub fn check(kind: &'static str, message: String) -> CliError {
        CliError::Diagnostics {
            kind,
            message,
            details: Value::Null,
        }
    }

    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Diagnostics { .. } => EXIT_DIAGNOSTICS,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) => m,
            CliError::Diagnostics { message, .. } => message,
        }
    }

    pub fn to_json(&self) -> Value {
        match self {
            CliError::Usage(m) => {
                json!({ "status": "error", "exit_code": EXIT_USAGE, "kind": "usage", "message": m })
            }
            CliError::Diagnostics {
                kind,
                message,
                details,
            } => json!({
                "status": "error",
                "exit_code": EXIT_DIAGNOSTICS,
                "kind": kind,
                "message": message,
                "diagnostics": details,
            }),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::Config(m) => CliError::Usage(m),
            Error::Io(io) => CliError::Usage(io.to_string()),
            Error::Invalid(d) => CliError::Diagnostics {
                kind: "invalid",
                message,
                details: json!(d),
            },
            Error::Parse(d) => CliError::Diagnostics {
                kind: "parse",
                message,
                details: json!(d),
            },
            Error::Lowering { rank, .. } => CliError::Diagnostics {
                kind: "lowering",
                message,
                details: json!({ "rank": rank }),
            },
            Error::Merge { members, .. } => CliError::Diagnostics {
                kind: "merge",
                message,
                details: json!({ "members": members }),
            },
            Error::Schedule(_) => CliError::check("schedule", message),
            Error::Exec(_) => CliError::check("execution", message),
        }
    }
}
