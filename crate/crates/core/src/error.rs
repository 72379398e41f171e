use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {lhs:?} vs {rhs:?} ({context})")]
    Shape {
        lhs: (usize, usize),
        rhs: (usize, usize),
        context: &'static str,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric failure in {name}: {detail}")]
    Numeric { name: String, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {}", format_lines(.lines))]
    Parse {
        path: PathBuf,
        lines: Vec<(usize, String)>,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt bundle: {0}")]
    Corruption(String),

    #[error("validation failed:\n{}", .0.join("\n"))]
    Validation(Vec<String>),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn numeric(name: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            name: name.into(),
            detail: detail.into(),
        }
    }
}

fn format_lines(lines: &[(usize, String)]) -> String {
    lines
        .iter()
        .map(|(n, msg)| format!("line {n}: {msg}"))
        .collect::<Vec<_>>()
        .join("; ")
}
