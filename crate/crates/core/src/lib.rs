//! Robust function-on-function linear regression.
//!
//! The pipeline represents predictor and response curves in a cubic B-spline
//! basis, extracts functional principal components (classically or by
//! robust projection pursuit), regresses response scores on predictor scores
//! with a trimmed multivariate least squares estimator, picks the number of
//! components with a (robust) information criterion, and finally flags
//! samples whose residual curves have low h-modal depth.
//!
//! The [`simgen`] module contains the two contamination scenarios used to
//! benchmark the whole procedure against its classical counterpart.

pub mod curve;
pub mod fpca;
pub mod model_select;
pub mod outlier;
pub mod regression;
pub mod rng;
pub mod simgen;
pub mod stats;

mod error;

pub use curve::{
    BSplineBasis, BasisExpansion, CenteredExpansion, Curve, CurveSet, GramFactor, TimeGrid,
};
pub use error::{Error, Result};
pub use fpca::{FpcaMethod, FpcaModel, RobustPpConfig, ScaleEstimator};
pub use model_select::{
    Criterion, CriterionScore, FlrModel, GridCell, GridFit, SelectConfig,
};
pub use outlier::{DepthConfig, DepthReport, RocCurve};
pub use regression::{MltsConfig, RegressionFit};
pub use simgen::{Scenario, ScenarioConfig, SimulatedDataset};
