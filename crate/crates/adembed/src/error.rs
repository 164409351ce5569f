//! Crate-wide error type.

use std::fmt;
use std::path::PathBuf;

use numgrad::NumgradError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// A corpus line failed to parse or validate.
    CorpusLine {
        line: usize,
        detail: String,
    },
    DuplicateRecordId {
        id: String,
    },
    /// A word-vector line has the wrong dimension.
    WordVectorDim {
        token: String,
        expected: usize,
        got: usize,
    },
    /// Configuration or precondition violation, one line of detail.
    Config(String),
    /// Loss construction failed inside the named term.
    LossTerm {
        term: &'static str,
        source: NumgradError,
    },
    /// Training aborted with a non-finite loss.
    TrainDiverged {
        step: usize,
        source: Box<Error>,
    },
    Checkpoint(String),
    /// A k-NN query word is missing from its vocabulary.
    UnknownQueryWord {
        word: String,
    },
    Numgrad(NumgradError),
    Json(serde_json::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Error::CorpusLine { line, detail } => {
                write!(f, "corpus line {line}: {detail}")
            }
            Error::DuplicateRecordId { id } => write!(f, "duplicate record id '{id}'"),
            Error::WordVectorDim {
                token,
                expected,
                got,
            } => write!(
                f,
                "word vector for '{token}' has dimension {got}, expected {expected}"
            ),
            Error::Config(detail) => write!(f, "config: {detail}"),
            Error::LossTerm { term, source } => write!(f, "loss term '{term}': {source}"),
            Error::TrainDiverged { step, source } => {
                write!(f, "training aborted at step {step}: {source}")
            }
            Error::Checkpoint(detail) => write!(f, "checkpoint: {detail}"),
            Error::UnknownQueryWord { word } => {
                write!(f, "query word '{word}' is not in the vocabulary")
            }
            Error::Numgrad(e) => write!(f, "{e}"),
            Error::Json(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<NumgradError> for Error {
    fn from(e: NumgradError) -> Self {
        Error::Numgrad(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
