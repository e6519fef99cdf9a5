//! JSON persistence of fitted models.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rfflr::{BSplineBasis, Criterion, CriterionScore, FlrModel, FpcaMethod, FpcaModel, TimeGrid};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: &str = "1.0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixDoc {
    pub rows: usize,
    pub cols: usize,
    /// Row-major entries.
    pub data: Vec<f64>,
}

impl MatrixDoc {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let data = m.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect();
        Self { rows: m.nrows(), cols: m.ncols(), data }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(CliError::IncompatibleModel(format!(
                "matrix declares {}x{} but holds {} entries",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisDoc {
    pub degree: usize,
    pub knots: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpcaDoc {
    pub method: FpcaMethod,
    pub basis: BasisDoc,
    pub mean_coefs: Vec<f64>,
    pub eigen_coefs: MatrixDoc,
    pub eigenvalues: Vec<f64>,
    pub total_variance: f64,
}

impl FpcaDoc {
    pub fn from_model(m: &FpcaModel) -> Self {
        Self {
            method: m.method(),
            basis: BasisDoc { degree: m.basis().degree(), knots: m.basis().knots().to_vec() },
            mean_coefs: m.mean_coefs().iter().copied().collect(),
            eigen_coefs: MatrixDoc::from_matrix(m.eigen_coefs()),
            eigenvalues: m.eigenvalues().iter().copied().collect(),
            total_variance: m.total_variance(),
        }
    }

    pub fn to_model(&self) -> Result<FpcaModel> {
        let bad = |e: rfflr::Error| CliError::IncompatibleModel(format!("invalid FPCA block: {e}"));
        let basis = BSplineBasis::from_knots(self.basis.degree, self.basis.knots.clone()).map_err(|e| bad(e.into()))?;
        FpcaModel::from_parts(
            basis,
            DVector::from_vec(self.mean_coefs.clone()),
            self.eigen_coefs.to_matrix()?,
            DVector::from_vec(self.eigenvalues.clone()),
            self.total_variance,
            self.method,
        )
        .map_err(|e| bad(e.into()))
    }
}

/// Criterion score; failed cells carry `null` in place of infinities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDoc {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub deviance: Option<f64>,
    pub penalty: Option<f64>,
    pub total: Option<f64>,
    pub scale: Option<f64>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl From<&CriterionScore> for ScoreDoc {
    fn from(s: &CriterionScore) -> Self {
        Self {
            m: s.m,
            k: s.k,
            deviance: finite(s.deviance),
            penalty: finite(s.penalty),
            total: finite(s.total),
            scale: finite(s.scale),
        }
    }
}

impl From<&ScoreDoc> for CriterionScore {
    fn from(s: &ScoreDoc) -> Self {
        Self {
            m: s.m,
            k: s.k,
            deviance: s.deviance.unwrap_or(f64::INFINITY),
            penalty: s.penalty.unwrap_or(f64::INFINITY),
            total: s.total.unwrap_or(f64::INFINITY),
            scale: s.scale.unwrap_or(f64::NAN),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub seed: u64,
    /// Seconds since the epoch, taken from `SOURCE_DATE_EPOCH` when set.
    pub created_unix: Option<u64>,
    pub inputs: Vec<InputDigest>,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub schema_version: String,
    pub method: FpcaMethod,
    pub criterion: Criterion,
    pub alpha: f64,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "B")]
    pub b: MatrixDoc,
    pub v: f64,
    /// Grid of the training predictors; new predictors must share it.
    pub x_grid: Vec<f64>,
    pub y_grid: Vec<f64>,
    pub fpca_x: FpcaDoc,
    pub fpca_y: FpcaDoc,
    pub criterion_table: Vec<ScoreDoc>,
    pub provenance: Provenance,
}

impl ModelDocument {
    pub fn from_model(model: &FlrModel, x_grid: &TimeGrid, provenance: Provenance) -> Self {
        Self {
            schema_version: SCHEMA_VERSION.to_string(),
            method: model.method,
            criterion: model.criterion,
            alpha: model.alpha,
            m: model.m,
            k: model.k,
            b: MatrixDoc::from_matrix(&model.coef),
            v: model.scale,
            x_grid: x_grid.points().to_vec(),
            y_grid: model.y_grid.points().to_vec(),
            fpca_x: FpcaDoc::from_model(&model.fpca_x),
            fpca_y: FpcaDoc::from_model(&model.fpca_y),
            criterion_table: model.criterion_table.iter().map(ScoreDoc::from).collect(),
            provenance,
        }
    }

    pub fn to_model(&self) -> Result<FlrModel> {
        let coef = self.b.to_matrix()?;
        if coef.shape() != (self.m, self.k) {
            return Err(CliError::IncompatibleModel(format!(
                "B is {}x{} but (M, K) = ({}, {})",
                coef.nrows(),
                coef.ncols(),
                self.m,
                self.k
            )));
        }
        let fpca_x = self.fpca_x.to_model()?;
        let fpca_y = self.fpca_y.to_model()?;
        if fpca_x.num_components() < self.m || fpca_y.num_components() < self.k {
            return Err(CliError::IncompatibleModel("fewer stored components than M or K".into()));
        }
        let y_grid = TimeGrid::new(self.y_grid.clone())
            .map_err(|e| CliError::IncompatibleModel(format!("invalid response grid: {e}")))?;
        Ok(FlrModel {
            fpca_x,
            fpca_y,
            y_grid,
            m: self.m,
            k: self.k,
            coef,
            scale: self.v,
            alpha: self.alpha,
            method: self.method,
            criterion: self.criterion,
            criterion_table: self.criterion_table.iter().map(CriterionScore::from).collect(),
        })
    }

    pub fn x_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.x_grid.clone())
            .map_err(|e| CliError::IncompatibleModel(format!("invalid predictor grid: {e}")))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| CliError::Failed(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    /// Parse a document, refusing unknown major schema versions.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| CliError::IncompatibleModel(format!("model file is not valid JSON: {e}")))?;
        let version = value
            .get("schema_version")
            .and_then(|v| v.as_str())
            .ok_or_else(|| CliError::IncompatibleModel("model file has no schema_version".into()))?;
        let major = SCHEMA_VERSION.split('.').next().unwrap_or_default();
        if version.split('.').next() != Some(major) {
            return Err(CliError::IncompatibleModel(format!(
                "unsupported schema version {version} (this build reads {major}.x)"
            )));
        }
        serde_json::from_value(value).map_err(|e| CliError::IncompatibleModel(format!("malformed model file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

pub fn digest(role: &str, path: &Path) -> Result<InputDigest> {
    Ok(InputDigest { role: role.to_string(), path: path.display().to_string(), sha256: sha256_file(path)? })
}

pub fn created_unix() -> Option<u64> {
    std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.trim().parse().ok())
}
