use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("undefined result: {0}")]
    UndefinedResult(String),
    #[error("numerical abort: loss term `{term}` is not finite")]
    NumericalAbort { term: String },
    #[error("unknown config key `{0}`")]
    UnknownConfigKey(String),
    #[error("bad value for config key `{key}`: {value}")]
    BadConfigValue { key: String, value: String },
    #[error("missing inputs:\n  {}", .0.join("\n  "))]
    MissingInputs(Vec<String>),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
