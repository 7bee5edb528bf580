use mcdm::Error;
use serde_json::json;

#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration; exit status 2.
    Config { field: String, message: String },
    /// Failure while running a command; exit status 1.
    Runtime(Error),
}

impl CliError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Maps a library parameter error to a config error under `section`.
    pub fn from_param(section: &str, e: Error) -> Self {
        match e {
            Error::Param { field, reason } => {
                CliError::config(format!("{section}.{field}"), reason)
            }
            other => CliError::config(section, other.to_string()),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Runtime(_) => 1,
        }
    }

    /// Single-line JSON description for stderr.
    pub fn to_json(&self) -> String {
        let v = match self {
            CliError::Config { field, message } => json!({
                "error": "config",
                "field": field,
                "message": message,
            }),
            CliError::Runtime(e) => json!({
                "error": "runtime",
                "kind": kind(e),
                "message": e.to_string(),
            }),
        };
        v.to_string()
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Param { .. } => "param",
        Error::Shape(_) => "shape",
        Error::Index { .. } => "index",
        Error::Generation { .. } => "generation",
        Error::Numeric(_) => "numeric",
        Error::DegenerateFeature => "degenerate_feature",
        Error::UndefinedMetric(_) => "undefined_metric",
        Error::Divergence { .. } => "divergence",
        Error::InsufficientFrames { .. } => "insufficient_frames",
        Error::DuplicatePath(_) => "duplicate_path",
        Error::Manifest(_) => "manifest",
        Error::Format { .. } => "format",
        Error::Checkpoint(_) => "checkpoint",
        Error::Io { .. } => "io",
    }
}
