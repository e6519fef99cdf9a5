use rfflr::curve::CurveError;
use rfflr::model_select::SelectError;
use rfflr::outlier::OutlierError;
use rfflr::regression::RegressionError;
use rfflr::simgen::SimError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Unreadable or malformed input.
    #[error("{0}")]
    Input(String),
    /// Settings that cannot be honoured for the given data.
    #[error("{0}")]
    Infeasible(String),
    /// Model file with an unknown schema or broken content.
    #[error("{0}")]
    IncompatibleModel(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::IncompatibleModel(_) => 4,
            CliError::Failed(_) => 1,
        }
    }

    pub fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into())
    }

    pub fn infeasible(msg: impl Into<String>) -> Self {
        CliError::Infeasible(msg.into())
    }
}

fn regression_is_config(e: &RegressionError) -> bool {
    matches!(e, RegressionError::Infeasible { .. } | RegressionError::InvalidAlpha(_))
}

fn select_kind(e: &SelectError) -> Option<fn(String) -> CliError> {
    match e {
        SelectError::Infeasible { .. } | SelectError::NoFeasibleCell | SelectError::UnknownCell { .. } => {
            Some(CliError::Infeasible)
        }
        SelectError::Regression(r) if regression_is_config(r) => Some(CliError::Infeasible),
        SelectError::SampleMismatch { .. } | SelectError::Curve(_) => Some(CliError::Input),
        _ => None,
    }
}

impl From<rfflr::Error> for CliError {
    fn from(e: rfflr::Error) -> Self {
        let msg = e.to_string();
        let kind: fn(String) -> CliError = match &e {
            rfflr::Error::Curve(c) => match c {
                CurveError::NonConvergence { .. } | CurveError::GramNotPositiveDefinite => CliError::Failed,
                _ => CliError::Input,
            },
            rfflr::Error::Regression(r) if regression_is_config(r) => CliError::Infeasible,
            rfflr::Error::Select(s) => select_kind(s).unwrap_or(CliError::Failed),
            rfflr::Error::Outlier(o) => match o {
                OutlierError::InvalidConfig(_) => CliError::Infeasible,
                OutlierError::Curve(_) | OutlierError::TooFewCurves | OutlierError::LengthMismatch { .. } => {
                    CliError::Input
                }
                OutlierError::Select(s) => select_kind(s).unwrap_or(CliError::Failed),
                _ => CliError::Failed,
            },
            rfflr::Error::Sim(s) => match s {
                SimError::BadFraction(_) | SimError::TooSmall | SimError::UnknownScenario(_) => CliError::Infeasible,
                _ => CliError::Failed,
            },
            _ => CliError::Failed,
        };
        kind(msg)
    }
}

macro_rules! from_core {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                rfflr::Error::from(e).into()
            }
        })*
    };
}

from_core!(CurveError, SelectError, OutlierError, RegressionError, SimError);

pub type Result<T, E = CliError> = std::result::Result<T, E>;
