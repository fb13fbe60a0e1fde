use std::path::PathBuf;

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] dnsd::Error),

    #[error("{0}")]
    Usage(String),

    #[error("invalid experiment spec: {0}")]
    Spec(String),

    #[error("no results.json found under {}", .0.display())]
    EmptyResults(PathBuf),

    #[error("all {0} runs failed")]
    AllRunsFailed(usize),

    #[error("{context}: {source}")]
    Csv {
        context: String,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Serialize)]
struct ErrorBody<'a> {
    code: &'a str,
    message: String,
}

#[derive(Debug, Serialize)]
struct ErrorEnvelope<'a> {
    error: ErrorBody<'a>,
}

impl CliError {
    /// Stable machine-readable identifier.
    pub fn code(&self) -> &'static str {
        use dnsd::Error as E;
        match self {
            CliError::Core(e) => match e {
                E::Shape { .. } => "shape",
                E::Index { .. } => "index",
                E::NonFinite(_) => "non_finite",
                E::Backward(_) => "backward",
                E::RankDeficient => "rank_deficient",
                E::Config(_) => "config",
                E::Io { .. } => "io",
                E::Json { .. } => "json",
                E::Format(_) => "format",
                E::Version { .. } => "version",
                E::Checksum { .. } => "checksum",
                E::Diverged { .. } => "diverged",
            },
            CliError::Usage(_) => "usage",
            CliError::Spec(_) => "spec",
            CliError::EmptyResults(_) => "empty_results",
            CliError::AllRunsFailed(_) => "all_runs_failed",
            CliError::Csv { .. } => "csv",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    /// `{"error":{"code":...,"message":...}}`
    pub fn to_json(&self) -> String {
        let envelope = ErrorEnvelope {
            error: ErrorBody {
                code: self.code(),
                message: self.to_string(),
            },
        };
        serde_json::to_string(&envelope).expect("error envelope serializes")
    }
}

pub(crate) fn csv_err(context: impl Into<String>) -> impl FnOnce(csv::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Csv { context, source }
}
