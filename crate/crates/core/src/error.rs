use nfhybrid_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{0} has no pixels to average over")]
    EmptySupport(&'static str),
    #[error("no all-inlier window of side {0}")]
    NoValidWindow(usize),
    #[error("non-finite {term} loss at epoch {epoch}")]
    NonFiniteLoss { term: &'static str, epoch: usize },
    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
