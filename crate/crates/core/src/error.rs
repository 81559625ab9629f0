use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("layer {index}: {source}")]
    Layer {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic: expected \"LDAP1\"")]
    BadMagic,

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("malformed header: {0}")]
    Header(String),

    #[error("shape chain broken: {0}")]
    ShapeChain(String),

    #[error("image format error: {0}")]
    Format(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("class {0} absent")]
    ClassAbsent(usize),

    #[error("too few samples for dimension: {0}")]
    Dimensionality(String),

    #[error("matrix not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("no convergence: {0}")]
    NoConvergence(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),
}

impl Error {
    pub(crate) fn at_layer(self, index: usize) -> Self {
        Error::Layer {
            index,
            source: Box::new(self),
        }
    }

    /// Stable short tag, used for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Layer { source, .. } => source.kind(),
            Error::Io(_) => "io",
            Error::BadMagic => "bad_magic",
            Error::Truncated(_) => "truncated",
            Error::Header(_) => "header",
            Error::ShapeChain(_) => "shape_chain",
            Error::Format(_) => "format",
            Error::Empty(_) => "empty",
            Error::ClassAbsent(_) => "class_absent",
            Error::Dimensionality(_) => "dimensionality",
            Error::NotPositiveDefinite(_) => "not_positive_definite",
            Error::NoConvergence(_) => "no_convergence",
            Error::NonFinite(_) => "non_finite",
        }
    }
}
