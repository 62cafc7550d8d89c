use thiserror::Error;

use crate::nn::NnError;
use crate::resource::ResourceError;
use crate::space::SpaceError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Resource(#[from] ResourceError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("enumeration cap exceeded: {count} architectures > cap {cap}")]
    EnumerationCap { count: u128, cap: u128 },
    #[error("empty Pareto front")]
    EmptyFront,
    #[error("cost band [{lo}, {hi}] unreachable after {draws} draws")]
    BandUnreachable { lo: f64, hi: f64, draws: usize },
    #[error("unsupported operation `{0}`")]
    UnsupportedOperation(String),
}
