use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {shapes:?}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: String },

    #[error("backward: loss must have a single element, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("grad_check: input {input} element {element}: {source}")]
    GradCheck {
        input: usize,
        element: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("photon floor violated: N0*fraction = {0} < 10")]
    PhotonFloor(f64),

    #[error("sample {0} has no positive in its batch")]
    NoPositive(usize),

    #[error("correlation undefined: {0} has zero variance")]
    ZeroVariance(&'static str),

    #[error("training diverged at step {step}")]
    Divergence { step: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
