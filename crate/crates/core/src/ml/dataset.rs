//! Datasets of (architecture features, fitted parameter) rows and their splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curve::FitParams;
use crate::error::{MaError, Result};
use crate::features::{build_features, FeatureVector, ModelArch, TransformKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TargetName {
    #[serde(rename = "A")]
    A,
    #[serde(rename = "lambda")]
    Lambda,
    #[serde(rename = "gamma")]
    Gamma,
    #[serde(rename = "t0")]
    T0,
    #[serde(rename = "K")]
    K,
}

impl TargetName {
    pub const ALL: [TargetName; 5] = [Self::A, Self::Lambda, Self::Gamma, Self::T0, Self::K];

    pub fn name(self) -> &'static str {
        match self {
            Self::A => "A",
            Self::Lambda => "lambda",
            Self::Gamma => "gamma",
            Self::T0 => "t0",
            Self::K => "K",
        }
    }

    pub fn default_transform(self) -> TransformKind {
        match self {
            Self::K => TransformKind::YeoJohnson,
            _ => TransformKind::Log1p,
        }
    }

    pub fn extract(self, p: &FitParams) -> f64 {
        match self {
            Self::A => p.amplitude,
            Self::Lambda => p.lambda,
            Self::Gamma => p.gamma,
            Self::T0 => p.t0,
            Self::K => p.baseline,
        }
    }
}

impl fmt::Display for TargetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub model_id: String,
    pub layer: u32,
    pub features: FeatureVector,
    /// Target on its original scale.
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDataset {
    pub target: TargetName,
    pub transform: TransformKind,
    pub rows: Vec<DatasetRow>,
}

/// Fitted parameters of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub model_id: String,
    pub layer: u32,
    pub params: FitParams,
}

impl ParamDataset {
    /// Joins fitted layers with their architectures. Rows come out sorted by
    /// (model, layer) regardless of input order.
    pub fn assemble(fits: &[LayerParams], registry: &[ModelArch], target: TargetName) -> Result<Self> {
        let archs: BTreeMap<&str, &ModelArch> = registry.iter().map(|a| (a.model_id.as_str(), a)).collect();
        let mut seen = BTreeSet::new();
        let mut rows = Vec::with_capacity(fits.len());
        for f in fits {
            if !seen.insert((f.model_id.as_str(), f.layer)) {
                return Err(MaError::InvalidInput(format!(
                    "duplicate fit for model {} layer {}",
                    f.model_id, f.layer
                )));
            }
            let arch = archs
                .get(f.model_id.as_str())
                .ok_or_else(|| MaError::NotFound(format!("no architecture for model {}", f.model_id)))?;
            let value = target.extract(&f.params);
            if !value.is_finite() {
                return Err(MaError::InvalidInput(format!(
                    "target {target} is not finite for {} layer {}",
                    f.model_id, f.layer
                )));
            }
            rows.push(DatasetRow {
                model_id: f.model_id.clone(),
                layer: f.layer,
                features: build_features(&arch.at_layer(f.layer))?,
                target: value,
            });
        }
        rows.sort_by(|a, b| a.model_id.cmp(&b.model_id).then(a.layer.cmp(&b.layer)));
        Ok(Self {
            target,
            transform: target.default_transform(),
            rows,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn feature_matrix(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.features.0.to_vec()).collect()
    }

    pub fn targets(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.target).collect()
    }
}

/// A train/test split with cross-validation folds over the training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Fold id of each entry of `train`.
    pub folds: Vec<usize>,
    pub k: usize,
}

impl SplitPlan {
    /// Row indices used for fitting and for validation in fold `f`.
    pub fn fold(&self, f: usize) -> (Vec<usize>, Vec<usize>) {
        let mut fit = Vec::new();
        let mut val = Vec::new();
        for (&row, &fold) in self.train.iter().zip(&self.folds) {
            if fold == f {
                val.push(row);
            } else {
                fit.push(row);
            }
        }
        (fit, val)
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.folds {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Shuffles `0..n_rows` with a seeded generator, holds out
/// `ceil(test_fraction * n_rows)` rows and deals the rest into `k` folds.
pub fn split_and_folds(n_rows: usize, test_fraction: f64, k: usize, seed: u64) -> Result<SplitPlan> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(MaError::InvalidInput(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    if k < 2 {
        return Err(MaError::InvalidInput(format!("need at least 2 folds, got {k}")));
    }
    let n_test = (test_fraction * n_rows as f64).ceil() as usize;
    if n_test == 0 || n_rows < n_test + k {
        return Err(MaError::InvalidInput(format!(
            "{n_rows} rows are too few for a {test_fraction} test split with {k} folds"
        )));
    }
    let mut order: Vec<usize> = (0..n_rows).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = order[..n_test].to_vec();
    let train = order[n_test..].to_vec();
    let folds = (0..train.len()).map(|i| i % k).collect();
    Ok(SplitPlan { train, test, folds, k })
}
