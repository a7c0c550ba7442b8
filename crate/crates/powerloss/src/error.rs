use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] powerloss_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}:{line}: {message}", path.display())]
    Csv {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{}:{line}: expected {expected} fields, found {found}", path.display())]
    RaggedRow {
        path: PathBuf,
        line: u64,
        expected: usize,
        found: usize,
    },
    #[error("{}:{line}: column `{column}`: `{value}` is not a number", path.display())]
    NonNumeric {
        path: PathBuf,
        line: u64,
        column: String,
        value: String,
    },
    #[error("{}:{line}: duplicate id `{id}`", path.display())]
    DuplicateId {
        path: PathBuf,
        line: u64,
        id: String,
    },
    #[error("{}:{line}: id `{id}` has no match in {}", path.display(), other.display())]
    IdMismatch {
        path: PathBuf,
        line: u64,
        id: String,
        other: PathBuf,
    },
    #[error("{}:{line}: binary covariate `{column}` has more than two levels (`{value}`)", path.display())]
    BinaryLevels {
        path: PathBuf,
        line: u64,
        column: String,
        value: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown grouping key `{0}`")]
    UnknownKey(String),
    #[error("{}: {source}", path.display())]
    Toml {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
