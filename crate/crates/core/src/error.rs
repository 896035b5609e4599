use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library can report. Variants are grouped so that the
/// command-line front end can map them onto its documented exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("schema error: missing tensor `{0}`")]
    MissingTensor(String),

    #[error("shape error for `{name}`: expected {expected:?}, found {actual:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("argument error: {0}")]
    Argument(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{stage} failed (subject {subject:?}, context size {context_size:?}): {source}")]
    Stage {
        stage: &'static str,
        subject: Option<String>,
        context_size: Option<usize>,
        #[source]
        source: Box<Error>,
    },

    #[error("word {word}: {source}")]
    AtWord {
        word: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_word(self, word: usize) -> Self {
        Error::AtWord {
            word,
            source: Box::new(self),
        }
    }

    pub(crate) fn in_stage(
        self,
        stage: &'static str,
        subject: Option<&str>,
        context_size: Option<usize>,
    ) -> Self {
        Error::Stage {
            stage,
            subject: subject.map(str::to_owned),
            context_size,
            source: Box::new(self),
        }
    }

    /// Process exit code: 2 configuration, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) => 2,
            Error::Numeric(_) | Error::Degenerate(_) => 4,
            Error::Stage { source, .. } | Error::AtWord { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}
