use std::path::PathBuf;

use thiserror::Error;

use icl_bayes_core::taskgen::Diagnostic;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read config `{}`: {message}", path.display())]
    File { path: PathBuf, message: String },

    #[error("config: {0}")]
    Parse(String),

    #[error("override `{0}`: {1}")]
    Override(String, String),

    #[error("config has {} problem(s):\n{}", .0.len(), render(.0))]
    Invalid(Vec<Diagnostic>),

    #[error("writing `{}`: {source}", path.display())]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] icl_bayes_core::Error),

    #[error("acceptance checks failed: {}", .0.join(", "))]
    CheckFailed(Vec<String>),
}

fn render(d: &[Diagnostic]) -> String {
    d.iter().map(|d| format!("  {d}")).collect::<Vec<_>>().join("\n")
}

impl CliError {
    /// 1 for configuration problems, 2 for numerical or I/O failures,
    /// 3 for failed acceptance checks.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::File { .. } | CliError::Parse(_) | CliError::Override(..) | CliError::Invalid(_) => 1,
            CliError::Core(icl_bayes_core::Error::Config { .. }) => 1,
            CliError::Output { .. } | CliError::Core(_) => 2,
            CliError::CheckFailed(_) => 3,
        }
    }
}
