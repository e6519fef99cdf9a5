use thiserror::Error;

use crate::curve::CurveError;
use crate::fpca::FpcaError;
use crate::model_select::SelectError;
use crate::outlier::OutlierError;
use crate::regression::RegressionError;
use crate::simgen::SimError;

/// Any error raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Curve(#[from] CurveError),
    #[error(transparent)]
    Fpca(#[from] FpcaError),
    #[error(transparent)]
    Regression(#[from] RegressionError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Outlier(#[from] OutlierError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
