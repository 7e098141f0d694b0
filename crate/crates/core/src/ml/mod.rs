//! Regressors that predict fitted curve parameters from architecture features.

pub mod dataset;
pub mod ensemble;
pub mod linear;
pub mod select;
pub mod tree;

use serde::{Deserialize, Serialize};

use crate::error::{MaError, Result};
use crate::features::Scaler;
use ensemble::{fit_boosted, fit_forest, BoostParams, Boosted, Forest, ForestParams};
use linear::{fit_lasso, fit_ridge, LinearModel};
use tree::Tree;

pub use dataset::{split_and_folds, LayerParams, ParamDataset, SplitPlan, TargetName};
pub use select::{evaluate_and_select, EvalConfig, Evaluation, KindResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressorKind {
    Ridge,
    Lasso,
    RandomForest,
    GradientBoosting,
}

impl RegressorKind {
    pub const ALL: [RegressorKind; 4] = [Self::Ridge, Self::Lasso, Self::RandomForest, Self::GradientBoosting];

    pub fn name(self) -> &'static str {
        match self {
            Self::Ridge => "ridge",
            Self::Lasso => "lasso",
            Self::RandomForest => "random_forest",
            Self::GradientBoosting => "gradient_boosting",
        }
    }

    pub fn is_tree(self) -> bool {
        matches!(self, Self::RandomForest | Self::GradientBoosting)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hyperparams {
    Ridge { alpha: f64 },
    Lasso { alpha: f64 },
    RandomForest(ForestParams),
    GradientBoosting(BoostParams),
}

impl Hyperparams {
    pub fn kind(&self) -> RegressorKind {
        match self {
            Self::Ridge { .. } => RegressorKind::Ridge,
            Self::Lasso { .. } => RegressorKind::Lasso,
            Self::RandomForest(_) => RegressorKind::RandomForest,
            Self::GradientBoosting(_) => RegressorKind::GradientBoosting,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FittedModel {
    Linear(LinearModel),
    Forest(Forest),
    Boosted(Boosted),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedRegressor {
    pub kind: RegressorKind,
    pub hyperparams: Hyperparams,
    pub seed: u64,
    pub n_features: usize,
    pub fitted: FittedModel,
}

/// Fits one regressor. Deterministic given `seed`.
pub fn train(hyperparams: &Hyperparams, x: &[Vec<f64>], y: &[f64], seed: u64) -> Result<TrainedRegressor> {
    if x.len() < 2 || x.len() != y.len() {
        return Err(MaError::InvalidInput(format!(
            "training needs at least 2 rows with matching targets, got {} rows and {} targets",
            x.len(),
            y.len()
        )));
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(MaError::InvalidInput(format!("target {i} is not finite")));
    }
    if let Some(i) = x.iter().position(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(MaError::InvalidInput(format!("feature row {i} is not finite")));
    }
    let fitted = match *hyperparams {
        Hyperparams::Ridge { alpha } => FittedModel::Linear(fit_ridge(x, y, alpha)?),
        Hyperparams::Lasso { alpha } => FittedModel::Linear(fit_lasso(x, y, alpha)?),
        Hyperparams::RandomForest(p) => FittedModel::Forest(fit_forest(x, y, &p, seed)?),
        Hyperparams::GradientBoosting(p) => FittedModel::Boosted(fit_boosted(x, y, &p)?.0),
    };
    Ok(TrainedRegressor {
        kind: hyperparams.kind(),
        hyperparams: *hyperparams,
        seed,
        n_features: x[0].len(),
        fitted,
    })
}

/// Anything that maps a feature row to a scalar.
pub trait Predictor {
    fn n_features(&self) -> usize;
    fn predict(&self, x: &[f64]) -> Result<f64>;

    fn predict_many(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        rows.iter().map(|r| self.predict(r)).collect()
    }
}

impl TrainedRegressor {
    /// Trees of a forest or boosted ensemble.
    pub fn trees(&self) -> Option<&[Tree]> {
        match &self.fitted {
            FittedModel::Linear(_) => None,
            FittedModel::Forest(f) => Some(&f.trees),
            FittedModel::Boosted(b) => Some(&b.trees),
        }
    }

    pub fn to_document(&self) -> ModelDocument {
        ModelDocument {
            format_version: MODEL_FORMAT_VERSION,
            model: self.clone(),
        }
    }
}

impl Predictor for TrainedRegressor {
    fn n_features(&self) -> usize {
        self.n_features
    }

    fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features {
            return Err(MaError::InvalidInput(format!(
                "expected {} features, got {}",
                self.n_features,
                x.len()
            )));
        }
        Ok(match &self.fitted {
            FittedModel::Linear(m) => m.predict(x),
            FittedModel::Forest(f) => f.predict(x),
            FittedModel::Boosted(b) => b.predict(x),
        })
    }
}

/// A regressor behind the feature scaler it was trained with; takes features
/// on their original scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    pub scaler: Scaler,
    pub model: TrainedRegressor,
}

impl Predictor for Pipeline {
    fn n_features(&self) -> usize {
        self.model.n_features
    }

    fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.model.n_features {
            return Err(MaError::InvalidInput(format!(
                "expected {} features, got {}",
                self.model.n_features,
                x.len()
            )));
        }
        self.model.predict(&self.scaler.transform_row(x))
    }
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format_version: u32,
    pub model: TrainedRegressor,
}

impl ModelDocument {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        if doc.format_version != MODEL_FORMAT_VERSION {
            return Err(MaError::Unsupported(format!(
                "model format version {} (expected {MODEL_FORMAT_VERSION})",
                doc.format_version
            )));
        }
        Ok(doc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub r2: f64,
    pub mae: f64,
    pub rmse: f64,
}

/// Coefficient of determination. A constant target scores 1 when matched
/// exactly and 0 otherwise.
pub fn r2_score(y: &[f64], pred: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let sse: f64 = y.iter().zip(pred).map(|(a, b)| (a - b).powi(2)).sum();
    if sst == 0.0 {
        return if sse == 0.0 { 1.0 } else { 0.0 };
    }
    1.0 - sse / sst
}

pub fn metrics(y: &[f64], pred: &[f64]) -> Result<Metrics> {
    if y.is_empty() || y.len() != pred.len() {
        return Err(MaError::InvalidInput("metrics need matching nonempty vectors".into()));
    }
    let n = y.len() as f64;
    Ok(Metrics {
        r2: r2_score(y, pred),
        mae: y.iter().zip(pred).map(|(a, b)| (a - b).abs()).sum::<f64>() / n,
        rmse: (y.iter().zip(pred).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n).sqrt(),
    })
}
