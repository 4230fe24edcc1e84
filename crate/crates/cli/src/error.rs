use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config{}: {message}", at_line(*.line))]
    Parse { line: Option<usize>, message: String },

    #[error("config{}: `{key}` {message}", at_line(*.line))]
    Config { key: String, line: Option<usize>, message: String },

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", .path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{}: header {found:?} differs from {expected:?} in the first shard", .path.display())]
    HeaderMismatch { path: PathBuf, expected: Vec<String>, found: Vec<String> },

    #[error("{}: {message}", .path.display())]
    BadHeader { path: PathBuf, message: String },

    #[error("{}: line {line}, column `{column}`: `{value}` is not a finite number", .path.display())]
    NonNumeric { path: PathBuf, line: u64, column: String, value: String },

    #[error("{}: shard has no data rows", .path.display())]
    EmptyShard { path: PathBuf },

    #[error("{0}")]
    Core(#[from] robagg::Error),

    #[error("{0}")]
    Usage(String),

    #[error("{failed} of {total} self-checks failed")]
    SelfCheck { failed: usize, total: usize },
}

fn at_line(line: Option<usize>) -> String {
    line.map_or_else(String::new, |l| format!(" line {l}"))
}

pub type Result<T> = std::result::Result<T, CliError>;
